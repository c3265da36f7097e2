#pragma once

// Hard-mask DSC and IoU from integer counts. Per class c with A = pred == c
// and B = truth == c:  DSC = 2|A&B| / (|A| + |B|),  IoU = |A&B| / |A|B|.
// A class absent from both masks scores 1.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "urwkv/error.hpp"

namespace urwkv {

struct ClassCounts {
  std::uint64_t inter = 0;
  std::uint64_t pred = 0;
  std::uint64_t truth = 0;

  std::uint64_t uni() const { return pred + truth - inter; }
  double dsc() const { return pred + truth == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(pred + truth); }
  double iou() const { return uni() == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni()); }
};

struct MetricReport {
  std::vector<double> dsc;  // per class
  std::vector<double> iou;
  double mean_dsc = 0;  // over foreground classes 1..n-1
  double mean_iou = 0;
  std::size_t samples = 0;
};

/// Accumulates counts over any number of mask pairs. Integer counts make the
/// result independent of accumulation order.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::size_t classes) : counts_(classes) {
    check(classes >= 2, ErrorKind::invalid_argument, "metrics: need at least 2 classes");
  }

  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
    check(pred.size() == truth.size(), ErrorKind::shape,
          "metrics: prediction has " + std::to_string(pred.size()) + " pixels, truth has " +
              std::to_string(truth.size()));
    const std::size_t n = counts_.size();
    for (std::size_t i = 0; i < pred.size(); ++i) {
      check(pred[i] < n && truth[i] < n, ErrorKind::invalid_argument, "metrics: label out of range");
      ++counts_[pred[i]].pred;
      ++counts_[truth[i]].truth;
      if (pred[i] == truth[i]) ++counts_[pred[i]].inter;
    }
    ++samples_;
  }

  const std::vector<ClassCounts>& counts() const { return counts_; }

  MetricReport report() const {
    MetricReport r;
    r.samples = samples_;
    for (const auto& c : counts_) {
      r.dsc.push_back(c.dsc());
      r.iou.push_back(c.iou());
    }
    for (std::size_t c = 1; c < counts_.size(); ++c) {
      r.mean_dsc += r.dsc[c];
      r.mean_iou += r.iou[c];
    }
    r.mean_dsc /= static_cast<double>(counts_.size() - 1);
    r.mean_iou /= static_cast<double>(counts_.size() - 1);
    return r;
  }

 private:
  std::vector<ClassCounts> counts_;
  std::size_t samples_ = 0;
};

inline MetricReport dsc_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                            std::size_t classes) {
  MetricAccumulator acc(classes);
  acc.add(pred, truth);
  return acc.report();
}

}  // namespace urwkv
