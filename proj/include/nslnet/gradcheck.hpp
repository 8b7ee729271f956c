#pragma once

#include <cstdint>
#include <string>

namespace nsl {

struct GradCheckResult {
    std::string scope;
    double max_rel_err = 0;
    std::int64_t trials = 0;
    bool pass = false;
};

// Double-precision central-difference checks of every backward path.
// `corrupt` != 0 perturbs the analytic gradients before comparison (negative
// control for the harness itself). Error metric: |a - fd| / max(1, |a|, |fd|),
// passing below 1e-4.
GradCheckResult gradcheck_nsl(int trials, std::uint64_t seed, double corrupt = 0);
GradCheckResult gradcheck_conv(int trials, std::uint64_t seed, double corrupt = 0);
GradCheckResult gradcheck_fc(int trials, std::uint64_t seed, double corrupt = 0);
GradCheckResult gradcheck_softmax(int trials, std::uint64_t seed, double corrupt = 0);
GradCheckResult gradcheck_full_net(int trials, std::uint64_t seed, double corrupt = 0);

GradCheckResult run_gradcheck_scope(const std::string& scope, int trials, std::uint64_t seed,
                                    double corrupt = 0);

}  // namespace nsl
