#ifndef ECO_BANK_HPP_
#define ECO_BANK_HPP_

#include <cstdint>
#include <vector>

#include "eco/numerics.hpp"
#include "eco/prompt_ensemble.hpp"

namespace eco {

// Labeled image features plus the class table that defines the task.
struct EmbeddingBank {
  std::size_t dim = 0;
  ClassTokenTable classes;
  std::vector<std::uint32_t> labels;
  std::vector<float> vectors;  // row-major [records, dim]

  std::size_t records() const { return labels.size(); }
  std::size_t num_classes() const { return classes.size(); }
  std::span<const float> vector(std::size_t r) const {
    return std::span<const float>(vectors).subspan(r * dim, dim);
  }
  void add(std::uint32_t label, std::span<const float> v);
  // Label range, finite and nonzero vectors, consistent extents.
  void validate() const;

  // Bank restricted to the given record indices, in that order.
  EmbeddingBank subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const EmbeddingBank&, const EmbeddingBank&) = default;
};

}  // namespace eco

#endif  // ECO_BANK_HPP_
