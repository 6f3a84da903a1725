#pragma once

// Token-level detector metrics computed from a confusion matrix.

#include <array>
#include <cstddef>
#include <span>

#include "utaca/datagen.hpp"

namespace utaca {

struct DetectorMetrics {
  double m_acc = 0.0;
  /// Recall of {Unknown, Hallucinated} treated as one positive class.
  double recall_n = 0.0;
  /// Recall of Correct.
  double recall_p = 0.0;
  /// Macro-F1 over the classes that occur in labels or predictions.
  double f1 = 0.0;
  /// confusion[true][predicted], indexed by TokenLabel.
  std::array<std::array<std::size_t, 3>, 3> confusion{};
  std::size_t count = 0;
};

/// Throws std::invalid_argument on empty or mismatched input. With
/// `merge_uncertain`, Unknown and Hallucinated are folded into one class
/// (stored under Unknown) before anything is counted.
DetectorMetrics detector_metrics(std::span<const TokenLabel> predictions, std::span<const TokenLabel> labels,
                                 bool merge_uncertain = false);

}  // namespace utaca
