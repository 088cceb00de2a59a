#pragma once

// Confusion-matrix segmentation metrics and the eight-direction polar
// breakdown for panoramas.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace panodeform::metrics {

inline constexpr std::int32_t kIgnore = 255;

/// K x K counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : k_(classes), counts_(classes * classes, 0) {}

  /// Adds joint counts; pixels with gt == 255 are skipped. Throws
  /// std::invalid_argument on length mismatch or out-of-range labels.
  void accumulate(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt);
  void merge(const ConfusionMatrix& other);

  std::size_t classes() const { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
  std::uint64_t total() const;
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct IoU {
  /// Per-class IoU in [0, 1]; empty when the class has zero union.
  std::vector<std::optional<double>> per_class;
  /// Mean over classes with non-zero union, in percent.
  double miou = 0.0;
};

IoU iou(const ConfusionMatrix& cm);

/// Sector of every column: sector 0 is centred on the centre column (front
/// view) and sectors proceed towards increasing column index, wrapping
/// around. When W is not divisible by n the remainder columns belong to the
/// last sector.
std::vector<std::size_t> column_sectors(std::size_t width, std::size_t n_sectors);

/// Per-sector confusion matrices for one or more panoramas.
class PolarAccumulator {
 public:
  PolarAccumulator(std::size_t classes, std::size_t n_sectors = 8);

  void accumulate(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, std::size_t height,
                  std::size_t width);

  const std::vector<ConfusionMatrix>& sectors() const { return sectors_; }
  std::vector<double> sector_miou() const;
  std::vector<std::uint64_t> sector_pixels() const;
  /// Pixel-weighted mean of the sector mIoUs.
  double weighted_mean_miou() const;

 private:
  std::vector<ConfusionMatrix> sectors_;
};

std::vector<std::string> class_names(std::size_t classes);

struct EvalReport {
  std::vector<std::string> names;
  IoU panorama;
  std::vector<double> sectors;
  std::vector<std::uint64_t> sector_pixels;
  std::optional<double> pinhole_miou;

  /// Pinhole mIoU minus panorama mIoU, when a pinhole evaluation exists.
  std::optional<double> gap() const;
  /// {per_class, miou, sectors, gap, ...} with keys in fixed order.
  std::string to_json() const;
  std::string to_text() const;
  /// sector,center_deg,miou,pixels
  std::string sectors_csv() const;
};

EvalReport make_report(const ConfusionMatrix& panorama, const PolarAccumulator& polar,
                       const ConfusionMatrix* pinhole);

}  // namespace panodeform::metrics
