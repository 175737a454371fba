#ifndef ECO_GRADCHECK_HPP_
#define ECO_GRADCHECK_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "eco/text_encoder.hpp"

namespace eco {

struct GradcheckResult {
  std::string path;  // "encoder", "ensemble", "loss"
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};

struct GradcheckOptions {
  double step = 1e-3;
  // The context path is more curved than a single encoder call; at 1e-3 its
  // truncation error alone reaches ~2e-4.
  double ensemble_step = 1e-4;
  // Denominator floor for the relative error, as a fraction of the largest
  // finite-difference magnitude in the same check.
  double relative_floor = 1e-3;
  std::size_t sequence_length = 8;
  std::size_t prompts = 2;
  std::size_t ctx_len = 2;
  std::size_t classes = 3;
  std::size_t batch = 4;
};

// Analytic vs central-difference gradients, in double precision, for the
// encoder input gradient, the end-to-end context gradient and the
// cross-entropy text-feature gradient on a random instance drawn from seed.
std::vector<GradcheckResult> run_gradcheck(const EncoderConfig& config,
                                           std::uint64_t seed,
                                           const GradcheckOptions& options = {});

// "toy" or comma-separated key=value overrides of the toy config, with keys
// layers, heads, width, out, vocab, positions.
EncoderConfig parse_dim_config(const std::string& text);

}  // namespace eco

#endif  // ECO_GRADCHECK_HPP_
