#include "utaca/metrics.hpp"

#include <stdexcept>

namespace utaca {

DetectorMetrics detector_metrics(std::span<const TokenLabel> predictions, std::span<const TokenLabel> labels,
                                 bool merge_uncertain) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("detector_metrics: length mismatch");
  if (labels.empty()) throw std::invalid_argument("detector_metrics: no tokens");
  auto cls = [&](TokenLabel l) {
    int i = static_cast<int>(l);
    if (i < 0 || i > 2) throw std::invalid_argument("detector_metrics: label out of range");
    if (merge_uncertain && i == 2) i = 1;
    return static_cast<std::size_t>(i);
  };

  DetectorMetrics m;
  m.count = labels.size();
  for (std::size_t i = 0; i < labels.size(); ++i) ++m.confusion[cls(labels[i])][cls(predictions[i])];

  const auto& cm = m.confusion;
  std::size_t correct = 0;
  for (std::size_t c = 0; c < 3; ++c) correct += cm[c][c];
  m.m_acc = static_cast<double>(correct) / static_cast<double>(m.count);

  const std::size_t pos_support = cm[0][0] + cm[0][1] + cm[0][2];
  const std::size_t neg_support = m.count - pos_support;
  m.recall_p = pos_support ? static_cast<double>(cm[0][0]) / static_cast<double>(pos_support) : 0.0;
  std::size_t neg_hit = 0;
  for (std::size_t t = 1; t < 3; ++t) {
    for (std::size_t p = 1; p < 3; ++p) neg_hit += cm[t][p];
  }
  m.recall_n = neg_support ? static_cast<double>(neg_hit) / static_cast<double>(neg_support) : 0.0;

  double f1_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t support = 0, predicted = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      support += cm[c][k];
      predicted += cm[k][c];
    }
    if (support == 0 && predicted == 0) continue;
    ++present;
    const double tp = static_cast<double>(cm[c][c]);
    f1_sum += 2.0 * tp / static_cast<double>(support + predicted);
  }
  m.f1 = f1_sum / static_cast<double>(present);
  return m;
}

}  // namespace utaca
