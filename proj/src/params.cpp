#include "panodeform/params.hpp"

#include <fstream>
#include <json.hpp>

#include "panodeform/pdt_io.hpp"
#include "panodeform/rng.hpp"

namespace panodeform {

Tensor ParamStore::add(const std::string& name, Shape shape, Init init, std::mt19937_64& rng,
                       double sigma) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  Tensor t = Tensor::zeros(std::move(shape), true);
  auto v = t.mutable_data();
  switch (init) {
    case Init::kZeros:
      break;
    case Init::kOnes:
      std::fill(v.begin(), v.end(), 1.0);
      break;
    case Init::kTruncNormal:
      for (auto& x : v) x = truncated_normal(rng, sigma);
      break;
  }
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return items_[it->second].second;
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

std::size_t ParamStore::copy_matching(const ParamStore& other) {
  std::size_t copied = 0;
  for (auto& [name, t] : items_) {
    if (!other.contains(name)) continue;
    const Tensor& src = other.get(name);
    if (src.shape() != t.shape()) continue;
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
    ++copied;
  }
  return copied;
}

void ParamStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir / "blobs");
  nlohmann::ordered_json index = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const auto& [name, t] = items_[i];
    const std::string file = "blobs/" + std::to_string(i) + ".pdt";
    save_pdt(dir / file, t);
    index[name] = {{"file", file}, {"shape", t.shape()}};
  }
  std::ofstream os(dir / "params.json");
  os << index.dump(2) << '\n';
}

void ParamStore::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "params.json");
  if (!is) throw FormatError("missing " + (dir / "params.json").string());
  const auto index = nlohmann::json::parse(is);
  for (auto& [name, t] : items_) {
    if (!index.contains(name)) throw FormatError("checkpoint lacks parameter " + name);
    const Tensor blob = load_pdt(dir / index[name]["file"].get<std::string>());
    if (blob.shape() != t.shape()) {
      throw FormatError("parameter " + name + " has shape " + shape_str(blob.shape()) +
                        ", expected " + shape_str(t.shape()));
    }
    std::copy(blob.data().begin(), blob.data().end(), t.mutable_data().begin());
  }
}

}  // namespace panodeform
