#include "panodeform/metrics.hpp"

#include <cstdio>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

namespace panodeform::metrics {

void ConfusionMatrix::accumulate(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("accumulate: prediction has " + std::to_string(pred.size()) +
                                " pixels, ground truth " + std::to_string(gt.size()));
  }
  const auto K = static_cast<std::int32_t>(k_);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == kIgnore) continue;
    if (gt[i] < 0 || gt[i] >= K || pred[i] < 0 || pred[i] >= K) {
      throw std::invalid_argument("accumulate: label out of range at pixel " + std::to_string(i));
    }
    ++counts_[static_cast<std::size_t>(gt[i]) * k_ + static_cast<std::size_t>(pred[i])];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw std::invalid_argument("merge: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

IoU iou(const ConfusionMatrix& cm) {
  const std::size_t K = cm.classes();
  IoU out;
  double sum = 0;
  std::size_t valid = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::uint64_t tp = cm.at(k, k), fp = 0, fn = 0;
    for (std::size_t o = 0; o < K; ++o) {
      if (o == k) continue;
      fp += cm.at(o, k);
      fn += cm.at(k, o);
    }
    const std::uint64_t uni = tp + fp + fn;
    if (uni == 0) {
      out.per_class.emplace_back();
      continue;
    }
    const double v = static_cast<double>(tp) / static_cast<double>(uni);
    out.per_class.emplace_back(v);
    sum += v;
    ++valid;
  }
  out.miou = valid ? 100.0 * sum / static_cast<double>(valid) : 0.0;
  return out;
}

std::vector<std::size_t> column_sectors(std::size_t width, std::size_t n) {
  if (n == 0 || width < n) throw std::invalid_argument("polar: need at least one column per sector");
  const std::size_t span = width / n;
  std::vector<std::size_t> sector(width);
  for (std::size_t j = 0; j < width; ++j) {
    // shift so the centre column sits in the middle of sector 0
    const std::size_t shifted = (j + width - width / 2 + span / 2) % width;
    sector[j] = std::min(shifted / span, n - 1);
  }
  return sector;
}

PolarAccumulator::PolarAccumulator(std::size_t classes, std::size_t n_sectors)
    : sectors_(n_sectors, ConfusionMatrix(classes)) {}

void PolarAccumulator::accumulate(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt,
                                  std::size_t height, std::size_t width) {
  if (pred.size() != height * width || gt.size() != height * width) {
    throw std::invalid_argument("polar: label maps do not match " + std::to_string(height) + "x" +
                                std::to_string(width));
  }
  const auto sector = column_sectors(width, sectors_.size());
  // Gather each sector's pixels, then accumulate once per sector.
  std::vector<std::vector<std::int32_t>> p(sectors_.size()), g(sectors_.size());
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      p[sector[j]].push_back(pred[i * width + j]);
      g[sector[j]].push_back(gt[i * width + j]);
    }
  }
  for (std::size_t s = 0; s < sectors_.size(); ++s) sectors_[s].accumulate(p[s], g[s]);
}

std::vector<double> PolarAccumulator::sector_miou() const {
  std::vector<double> out;
  for (const auto& cm : sectors_) out.push_back(iou(cm).miou);
  return out;
}

std::vector<std::uint64_t> PolarAccumulator::sector_pixels() const {
  std::vector<std::uint64_t> out;
  for (const auto& cm : sectors_) out.push_back(cm.total());
  return out;
}

double PolarAccumulator::weighted_mean_miou() const {
  double sum = 0, total = 0;
  for (const auto& cm : sectors_) {
    const auto n = static_cast<double>(cm.total());
    sum += n * iou(cm).miou;
    total += n;
  }
  return total > 0 ? sum / total : 0.0;
}

std::vector<std::string> class_names(std::size_t classes) {
  const std::vector<std::string> fixed{"sky", "ground", "wall"};
  std::vector<std::string> names;
  for (std::size_t k = 0; k < classes; ++k) {
    if (k < fixed.size()) {
      names.push_back(fixed[k]);
    } else {
      names.push_back(k - 3 < 26 ? "object_" + std::string(1, static_cast<char>('a' + (k - 3)))
                                 : "object_" + std::to_string(k - 3));
    }
  }
  return names;
}

std::optional<double> EvalReport::gap() const {
  if (!pinhole_miou) return std::nullopt;
  return *pinhole_miou - panorama.miou;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json doc;
  nlohmann::ordered_json per_class;
  for (std::size_t k = 0; k < names.size(); ++k) {
    per_class[names[k]] = panorama.per_class[k] ? nlohmann::ordered_json(*panorama.per_class[k]) : nullptr;
  }
  doc["per_class"] = per_class;
  doc["miou"] = panorama.miou;
  doc["sectors"] = sectors;
  doc["sector_pixels"] = sector_pixels;
  doc["gap"] = gap() ? nlohmann::ordered_json(*gap()) : nullptr;
  doc["pinhole_miou"] = pinhole_miou ? nlohmann::ordered_json(*pinhole_miou) : nullptr;
  return doc.dump(2) + "\n";
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  char line[128];
  os << "class          IoU\n";
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (panorama.per_class[k]) {
      std::snprintf(line, sizeof line, "%-14s %6.2f\n", names[k].c_str(), 100.0 * *panorama.per_class[k]);
    } else {
      std::snprintf(line, sizeof line, "%-14s    n/a\n", names[k].c_str());
    }
    os << line;
  }
  std::snprintf(line, sizeof line, "mIoU           %6.2f\n", panorama.miou);
  os << line << "polar sectors (0 = front):";
  for (double s : sectors) {
    std::snprintf(line, sizeof line, " %.1f", s);
    os << line;
  }
  os << "\n";
  if (pinhole_miou) {
    std::snprintf(line, sizeof line, "pinhole mIoU   %6.2f   gap %+.2f\n", *pinhole_miou, *gap());
    os << line;
  }
  return os.str();
}

std::string EvalReport::sectors_csv() const {
  std::ostringstream os;
  os << "sector,center_deg,miou,pixels\n";
  const double step = 360.0 / static_cast<double>(sectors.size());
  for (std::size_t s = 0; s < sectors.size(); ++s) {
    char line[96];
    std::snprintf(line, sizeof line, "%zu,%.1f,%.6f,%llu\n", s, static_cast<double>(s) * step, sectors[s],
                  static_cast<unsigned long long>(sector_pixels[s]));
    os << line;
  }
  return os.str();
}

EvalReport make_report(const ConfusionMatrix& panorama, const PolarAccumulator& polar,
                       const ConfusionMatrix* pinhole) {
  EvalReport r;
  r.names = class_names(panorama.classes());
  r.panorama = iou(panorama);
  r.sectors = polar.sector_miou();
  r.sector_pixels = polar.sector_pixels();
  if (pinhole) r.pinhole_miou = iou(*pinhole).miou;
  return r;
}

}  // namespace panodeform::metrics
