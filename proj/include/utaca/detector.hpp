#pragma once

// Token-level uncertainty detector.
//
// Per generated token the detector sees the decoder's logit margin and output
// embedding. Both are encoded and fused into z_t, an LSTM carries history
// across tokens, and a residual MLP head turns h_t into a distribution over
// {correct, unknown, hallucinated} (the GDM).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "utaca/datagen.hpp"
#include "utaca/numerics.hpp"

namespace utaca {

struct GdmVector {
  double p_cor = 1.0;
  double p_unk = 0.0;
  double p_hal = 0.0;

  bool operator==(const GdmVector&) const = default;
};

/// Expand when the non-grounded mass is strictly larger: p_unk + p_hal > p_cor.
bool should_expand(const GdmVector& p);

/// Largest minus second-largest logit. Throws for fewer than two logits.
double logit_margin(std::span<const double> logits);

struct DetectorState {
  Vec h;
  Vec c;

  bool operator==(const DetectorState&) const = default;
};

struct TokenSignal {
  Vec embedding;
  double margin = 0.0;
  /// Present only where the token contributes to the training loss.
  std::optional<TokenLabel> label;
};

enum class HeadMode { ThreeWay, TwoWayMerged };

std::string to_string(HeadMode m);
HeadMode head_mode_from_string(const std::string& s);

struct DetectorConfig {
  bool use_logm = true;  // margin branch
  bool use_se = true;    // embedding branch
  bool use_lstm = true;
  HeadMode head = HeadMode::ThreeWay;

  std::size_t input_dim = 32;
  std::size_t d_model = 64;
  std::size_t mlp_dim = 32;
  std::size_t head_blocks = 3;
  std::size_t head_expansion = 2;

  double dropout_vec = 0.5;
  double dropout_mlp = 0.1;
  double dropout_head = 0.1;

  std::uint64_t seed = 5;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  std::size_t epochs = 30;
  /// Sequences per optimizer step.
  std::size_t batch_size = 16;
  /// Validate every this many epochs (and after the last one).
  std::size_t eval_every = 1;

  std::size_t class_count() const { return head == HeadMode::ThreeWay ? 3 : 2; }
  void validate() const;
};

struct HeadBlock {
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;
};

struct TensorView {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<double> data;
};

struct DetectorParams {
  // Embedding encoder.
  Mat we;
  Vec be;
  // Margin MLP: 1 -> mlp_dim -> d_model.
  Mat m1;
  Vec mb1;
  Mat m2;
  Vec mb2;
  Vec ln_gamma;
  Vec ln_beta;
  // LSTM, gate rows ordered input, forget, cell, output.
  Mat wx;
  Mat wh;
  Vec lb;
  std::vector<HeadBlock> head;
  Mat wg;
  Vec bg;

  /// Seeded initialization (uniform fan-in scaling, unit LN, forget bias 1).
  static DetectorParams init(const DetectorConfig& config);
  /// Same shapes, all zero.
  static DetectorParams zeros(const DetectorConfig& config);

  /// Every tensor in declaration order. LSTM tensors are omitted when the
  /// config disables the LSTM.
  std::vector<TensorView> tensors(const DetectorConfig& config);
  std::size_t parameter_count(const DetectorConfig& config);

  bool operator==(const DetectorParams&) const;
};

/// Raised when training produces a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inference-mode building blocks (no dropout).
Vec fuse(const DetectorParams& params, const TokenSignal& signal, const DetectorConfig& config);
DetectorState lstm_step(const DetectorParams& params, std::span<const double> z, const DetectorState& state,
                        const DetectorConfig& config);
GdmVector classify(const DetectorParams& params, std::span<const double> h, const DetectorConfig& config);

/// Raw class probabilities (2 or 3 entries) before the GDM split convention.
Vec class_probabilities(const DetectorParams& params, std::span<const double> h, const DetectorConfig& config);

/// Two-way probabilities [p_cor, p_not] reported as a GDM with p_unk = p_hal = p_not / 2.
GdmVector gdm_from_probabilities(std::span<const double> probs, HeadMode mode);

/// Predicted class under `mode`: argmax of the raw probabilities.
TokenLabel predicted_label(std::span<const double> probs, HeadMode mode);

DetectorState initial_state(const DetectorConfig& config);

/// The operations the controller needs from a detector. Stubs implement
/// this to force or suppress expansion.
class UncertaintyDetector {
 public:
  virtual ~UncertaintyDetector() = default;
  virtual Vec encode(const TokenSignal& signal) const = 0;
  virtual DetectorState advance(std::span<const double> z, const DetectorState& state) const = 0;
  virtual GdmVector classify(std::span<const double> h) const = 0;
  virtual DetectorState initial_state() const = 0;
  /// Expected embedding length, or 0 if any length is accepted.
  virtual std::size_t input_dim() const = 0;
};

class Detector final : public UncertaintyDetector {
 public:
  Detector(DetectorConfig config, DetectorParams params);

  Vec encode(const TokenSignal& signal) const override { return fuse(params_, signal, config_); }
  DetectorState advance(std::span<const double> z, const DetectorState& state) const override {
    return lstm_step(params_, z, state, config_);
  }
  GdmVector classify(std::span<const double> h) const override { return utaca::classify(params_, h, config_); }
  DetectorState initial_state() const override { return utaca::initial_state(config_); }
  std::size_t input_dim() const override { return config_.input_dim; }

  const DetectorConfig& config() const { return config_; }
  const DetectorParams& params() const { return params_; }

 private:
  DetectorConfig config_;
  DetectorParams params_;
};

/// Runs the detector over a sequence from the initial state and returns the
/// raw class probabilities per step.
std::vector<Vec> predict_sequence(const DetectorParams& params, std::span<const TokenSignal> seq,
                                  const DetectorConfig& config);

using SignalSequence = std::vector<TokenSignal>;

/// Mean cross-entropy over labeled tokens of `seqs` (dropout off).
double sequence_loss(const DetectorParams& params, std::span<const SignalSequence> seqs,
                     const DetectorConfig& config);

/// Analytic gradient of sequence_loss, laid out like params.tensors().
DetectorParams loss_gradient(const DetectorParams& params, std::span<const SignalSequence> seqs,
                             const DetectorConfig& config);

struct EpochReport {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_f1 = 0.0;
};

struct TrainingResult {
  DetectorParams params;
  std::size_t best_epoch = 0;
  double best_f1 = 0.0;
  std::vector<EpochReport> report;
};

/// Minibatch SGD with momentum on the masked cross-entropy, full BPTT.
/// Keeps the parameters with the best validation macro-F1 (earliest on ties).
/// Row 0 of the report is the initial model. `progress` is called per row.
TrainingResult train(const DetectorConfig& config, std::span<const SignalSequence> train_set,
                     std::span<const SignalSequence> val_set,
                     const std::function<void(const EpochReport&)>& progress = {});

/// Validation macro-F1 of params on seqs (labeled tokens only).
double validation_f1(const DetectorParams& params, std::span<const SignalSequence> seqs,
                     const DetectorConfig& config);

/// Largest relative difference between analytic and central-difference
/// gradients over every parameter, relative error |a-n| / max(|a|, |n|, 1e-6).
double grad_check(const DetectorConfig& config, const DetectorParams& params,
                  std::span<const SignalSequence> sample, double step = 1e-5);

}  // namespace utaca
