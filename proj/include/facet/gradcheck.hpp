#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "facet/tensor.hpp"

namespace facet::ad {

struct GradCheckOptions {
    double step = 1e-6;             // scaled per component by max(1, |x|)
    double rel_floor = 1e-6;        // denominator floor of the relative error
    std::size_t max_probes = 0;     // probes per leaf; 0 = every component
    std::uint64_t seed = 0;         // component subsampling when capped
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::size_t probes = 0;
    std::string worst; // human-readable description of the worst component

    bool ok(double tol) const { return max_rel_err <= tol; }
};

// Compares the tape's reverse-mode gradients of `root` with central finite
// differences over the given leaves. The tape is replayed for each probe and
// restored afterwards; `root` must be scalar.
GradCheckResult gradcheck(Tape& tape, Tensor root, const std::vector<Tensor>& leaves,
                          const GradCheckOptions& opt = {});

} // namespace facet::ad
