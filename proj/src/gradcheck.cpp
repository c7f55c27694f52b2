#include "facet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "facet/rng.hpp"

namespace facet::ad {

GradCheckResult gradcheck(Tape& tape, Tensor root, const std::vector<Tensor>& leaves,
                          const GradCheckOptions& opt) {
    check(root.size() == 1, "gradcheck: root must be scalar");

    // Analytic pass first; probing below only rewrites values, not grads.
    tape.zero_grad();
    tape.backward(root);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const Tensor& leaf : leaves) {
        check(leaf.tape() == &tape, "gradcheck: leaf from a different tape");
        analytic.push_back(leaf.requires_grad() ? leaf.grad()
                                                : std::vector<double>(leaf.size(), 0.0));
    }

    GradCheckResult res;
    Rng rng(opt.seed);
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const Tensor& leaf = leaves[li];
        const std::vector<double> base = leaf.values();

        std::vector<std::size_t> probe_at(base.size());
        std::iota(probe_at.begin(), probe_at.end(), 0);
        if (opt.max_probes > 0 && probe_at.size() > opt.max_probes) {
            // Deterministic subsample: draw without replacement.
            for (std::size_t i = 0; i < opt.max_probes; ++i) {
                const int span = static_cast<int>(probe_at.size() - i) - 1;
                const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(0, span));
                std::swap(probe_at[i], probe_at[j]);
            }
            probe_at.resize(opt.max_probes);
            std::sort(probe_at.begin(), probe_at.end());
        }

        std::vector<double> probe = base;
        for (std::size_t ci : probe_at) {
            const double h = opt.step * std::max(1.0, std::fabs(base[ci]));
            probe[ci] = base[ci] + h;
            tape.set_leaf_values(leaf, probe);
            tape.replay();
            const double fp = root.scalar();
            probe[ci] = base[ci] - h;
            tape.set_leaf_values(leaf, probe);
            tape.replay();
            const double fm = root.scalar();
            probe[ci] = base[ci];

            const double fd = (fp - fm) / (2.0 * h);
            const double an = analytic[li][ci];
            const double abs_err = std::fabs(an - fd);
            const double rel_err =
                abs_err / std::max({std::fabs(an), std::fabs(fd), opt.rel_floor});
            ++res.probes;
            if (rel_err > res.max_rel_err) {
                res.max_rel_err = rel_err;
                std::ostringstream os;
                os << "leaf " << li << " [" << ci << "]: analytic " << an << " vs fd " << fd;
                res.worst = os.str();
            }
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
        }
        tape.set_leaf_values(leaf, base);
    }
    tape.replay(); // restore the unperturbed state
    return res;
}

} // namespace facet::ad
