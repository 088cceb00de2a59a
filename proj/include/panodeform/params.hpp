#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "panodeform/tensor.hpp"

namespace panodeform {

enum class Init { kZeros, kOnes, kTruncNormal };

/// Named, ordered collection of trainable tensors. Registration order is the
/// iteration order everywhere (optimizer, checkpoints, gradient audits).
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, Init init, std::mt19937_64& rng,
             double sigma = 0.02);

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t count() const;
  void zero_grad();

  /// Copies values of every same-named, same-shaped parameter from `other`.
  /// Returns the number copied.
  std::size_t copy_matching(const ParamStore& other);

  /// Checkpoint = `params.json` index + one PDT1 blob per parameter.
  void save(const std::filesystem::path& dir) const;
  /// Loads values into already-registered parameters; names and shapes must match.
  void load(const std::filesystem::path& dir);

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace panodeform
