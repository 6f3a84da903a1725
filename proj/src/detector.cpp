#include "utaca/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "utaca/metrics.hpp"

namespace utaca {

bool should_expand(const GdmVector& p) { return p.p_unk + p.p_hal > p.p_cor; }

double logit_margin(std::span<const double> logits) {
  if (logits.size() < 2) throw std::invalid_argument("logit_margin: need at least two logits");
  double first = -std::numeric_limits<double>::infinity();
  double second = first;
  for (double v : logits) {
    if (v > first) {
      second = first;
      first = v;
    } else if (v > second) {
      second = v;
    }
  }
  return first - second;
}

std::string to_string(HeadMode m) { return m == HeadMode::ThreeWay ? "three_way" : "two_way"; }

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "three_way" || s == "3") return HeadMode::ThreeWay;
  if (s == "two_way" || s == "two_way_merged" || s == "2") return HeadMode::TwoWayMerged;
  throw std::invalid_argument("unknown head mode '" + s + "'");
}

void DetectorConfig::validate() const {
  if (!use_logm && !use_se) throw std::invalid_argument("DetectorConfig: at least one of LogM/SE must be enabled");
  if (input_dim == 0 || d_model == 0 || mlp_dim == 0 || head_expansion == 0) {
    throw std::invalid_argument("DetectorConfig: dimensions must be positive");
  }
  for (double p : {dropout_vec, dropout_mlp, dropout_head}) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("DetectorConfig: dropout rate must be in [0,1)");
  }
  if (batch_size == 0) throw std::invalid_argument("DetectorConfig: batch_size must be positive");
  if (eval_every == 0) throw std::invalid_argument("DetectorConfig: eval_every must be positive");
  if (learning_rate < 0.0 || momentum < 0.0 || momentum >= 1.0) {
    throw std::invalid_argument("DetectorConfig: bad optimizer settings");
  }
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

DetectorParams shaped(const DetectorConfig& c, std::mt19937_64* rng) {
  auto mat = [&](std::size_t r, std::size_t k) {
    if (!rng) return Mat(r, k);
    return random_uniform(*rng, r, k, 1.0 / std::sqrt(static_cast<double>(k)));
  };
  const std::size_t d = c.d_model;
  const std::size_t e = d * c.head_expansion;
  DetectorParams p;
  p.we = mat(d, c.input_dim);
  p.be.assign(d, 0.0);
  p.m1 = mat(c.mlp_dim, 1);
  p.mb1.assign(c.mlp_dim, 0.0);
  p.m2 = mat(d, c.mlp_dim);
  p.mb2.assign(d, 0.0);
  p.ln_gamma.assign(d, rng ? 1.0 : 0.0);
  p.ln_beta.assign(d, 0.0);
  p.wx = mat(4 * d, d);
  p.wh = mat(4 * d, d);
  p.lb.assign(4 * d, 0.0);
  if (rng) std::fill(p.lb.begin() + static_cast<std::ptrdiff_t>(d), p.lb.begin() + static_cast<std::ptrdiff_t>(2 * d), 1.0);
  for (std::size_t b = 0; b < c.head_blocks; ++b) {
    HeadBlock hb;
    hb.w1 = mat(e, d);
    hb.b1.assign(e, 0.0);
    hb.w2 = mat(d, e);
    hb.b2.assign(d, 0.0);
    p.head.push_back(std::move(hb));
  }
  p.wg = mat(c.class_count(), d);
  p.bg.assign(c.class_count(), 0.0);
  return p;
}

}  // namespace

DetectorParams DetectorParams::init(const DetectorConfig& config) {
  config.validate();
  auto rng = seeded_engine({config.seed, 0xde7ecULL});
  return shaped(config, &rng);
}

DetectorParams DetectorParams::zeros(const DetectorConfig& config) {
  config.validate();
  return shaped(config, nullptr);
}

std::vector<TensorView> DetectorParams::tensors(const DetectorConfig& config) {
  std::vector<TensorView> out;
  auto mat = [&](std::string name, Mat& m) {
    out.push_back({std::move(name), {m.rows(), m.cols()}, std::span<double>(m.values())});
  };
  auto vec = [&](std::string name, Vec& v) { out.push_back({std::move(name), {v.size()}, std::span<double>(v)}); };
  mat("vec.weight", we);
  vec("vec.bias", be);
  mat("mlp.fc1.weight", m1);
  vec("mlp.fc1.bias", mb1);
  mat("mlp.fc2.weight", m2);
  vec("mlp.fc2.bias", mb2);
  vec("ln.gamma", ln_gamma);
  vec("ln.beta", ln_beta);
  if (config.use_lstm) {
    mat("lstm.wx", wx);
    mat("lstm.wh", wh);
    vec("lstm.bias", lb);
  }
  for (std::size_t b = 0; b < head.size(); ++b) {
    const std::string prefix = "head." + std::to_string(b) + ".";
    mat(prefix + "fc1.weight", head[b].w1);
    vec(prefix + "fc1.bias", head[b].b1);
    mat(prefix + "fc2.weight", head[b].w2);
    vec(prefix + "fc2.bias", head[b].b2);
  }
  mat("out.weight", wg);
  vec("out.bias", bg);
  return out;
}

std::size_t DetectorParams::parameter_count(const DetectorConfig& config) {
  std::size_t n = 0;
  for (const TensorView& t : tensors(config)) n += t.data.size();
  return n;
}

bool DetectorParams::operator==(const DetectorParams& o) const {
  if (head.size() != o.head.size()) return false;
  for (std::size_t b = 0; b < head.size(); ++b) {
    const HeadBlock& x = head[b];
    const HeadBlock& y = o.head[b];
    if (!(x.w1 == y.w1 && x.b1 == y.b1 && x.w2 == y.w2 && x.b2 == y.b2)) return false;
  }
  return we == o.we && be == o.be && m1 == o.m1 && mb1 == o.mb1 && m2 == o.m2 && mb2 == o.mb2 &&
         ln_gamma == o.ln_gamma && ln_beta == o.ln_beta && wx == o.wx && wh == o.wh && lb == o.lb && wg == o.wg &&
         bg == o.bg;
}

// ---------------------------------------------------------------------------
// Forward pass. One implementation serves inference (no masks) and training
// (masks drawn from an engine, activations kept for backprop).

namespace {

struct Masks {
  std::mt19937_64* rng = nullptr;

  // Inverted dropout mask; all ones when inactive.
  Vec draw(std::size_t n, double p) const {
    Vec m(n, 1.0);
    if (!rng || p <= 0.0) return m;
    std::bernoulli_distribution keep(1.0 - p);
    const double scale = 1.0 / (1.0 - p);
    for (double& v : m) v = keep(*rng) ? scale : 0.0;
    return m;
  }
};

struct FuseTrace {
  Vec x;
  double margin = 0.0;
  Vec a_e, mask_e;
  Vec a1, mask1, d1;
  Vec xhat;
  double inv_std = 0.0;
  Vec z;
};

struct LstmTrace {
  Vec h_prev, c_prev;
  Vec i, f, g, o, c, tanh_c, h;
};

struct BlockTrace {
  Vec h_in, u, mask_u, hh, mask_w;
};

struct HeadTrace {
  std::vector<BlockTrace> blocks;
  Vec h_final;
  Vec probs;
};

Vec fuse_forward(const DetectorParams& p, const TokenSignal& s, const DetectorConfig& c, const Masks& masks,
                 FuseTrace* tr) {
  const std::size_t d = c.d_model;
  if (!std::isfinite(s.margin)) throw std::invalid_argument("fuse: margin is not finite");
  Vec sum(d, 0.0);
  if (c.use_se) {
    if (s.embedding.size() != c.input_dim) {
      throw DimensionError("fuse: embedding length " + std::to_string(s.embedding.size()) + " != input_dim " +
                           std::to_string(c.input_dim));
    }
    Vec a = affine(p.we, s.embedding, p.be);
    Vec mask = masks.draw(d, c.dropout_vec);
    for (std::size_t k = 0; k < d; ++k) sum[k] += gelu(a[k]) * mask[k];
    if (tr) {
      tr->x = s.embedding;
      tr->a_e = std::move(a);
      tr->mask_e = std::move(mask);
    }
  }
  if (c.use_logm) {
    const double m = s.margin;
    Vec a1(c.mlp_dim);
    for (std::size_t k = 0; k < c.mlp_dim; ++k) a1[k] = p.m1(k, 0) * m + p.mb1[k];
    Vec mask1 = masks.draw(c.mlp_dim, c.dropout_mlp);
    Vec d1(c.mlp_dim);
    for (std::size_t k = 0; k < c.mlp_dim; ++k) d1[k] = gelu(a1[k]) * mask1[k];
    const Vec a2 = affine(p.m2, d1, p.mb2);
    for (std::size_t k = 0; k < d; ++k) sum[k] += a2[k];
    if (tr) {
      tr->margin = m;
      tr->a1 = std::move(a1);
      tr->mask1 = std::move(mask1);
      tr->d1 = std::move(d1);
    }
  }
  // Same arithmetic as layer_norm(), keeping the normalized vector.
  const double n = static_cast<double>(d);
  double mean = 0.0;
  for (double v : sum) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : sum) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  Vec z(d);
  Vec xhat(d);
  for (std::size_t k = 0; k < d; ++k) {
    xhat[k] = (sum[k] - mean) * inv;
    z[k] = xhat[k] * p.ln_gamma[k] + p.ln_beta[k];
  }
  if (tr) {
    tr->xhat = std::move(xhat);
    tr->inv_std = inv;
    tr->z = z;
  }
  return z;
}

DetectorState lstm_forward(const DetectorParams& p, std::span<const double> z, const DetectorState& st,
                           const DetectorConfig& c, LstmTrace* tr) {
  const std::size_t d = c.d_model;
  if (z.size() != d) throw DimensionError("lstm_step: z length mismatch");
  if (!c.use_lstm) return DetectorState{Vec(z.begin(), z.end()), Vec(d, 0.0)};
  if (st.h.size() != d || st.c.size() != d) throw DimensionError("lstm_step: state length mismatch");
  Vec gates = affine(p.wx, z, p.lb);
  add_inplace(gates, matvec(p.wh, st.h));
  DetectorState out{Vec(d), Vec(d)};
  Vec i(d), f(d), g(d), o(d), tc(d);
  for (std::size_t k = 0; k < d; ++k) {
    i[k] = sigmoid(gates[k]);
    f[k] = sigmoid(gates[d + k]);
    g[k] = std::tanh(gates[2 * d + k]);
    o[k] = sigmoid(gates[3 * d + k]);
    out.c[k] = f[k] * st.c[k] + i[k] * g[k];
    tc[k] = std::tanh(out.c[k]);
    out.h[k] = o[k] * tc[k];
  }
  if (tr) {
    tr->h_prev = st.h;
    tr->c_prev = st.c;
    tr->i = std::move(i);
    tr->f = std::move(f);
    tr->g = std::move(g);
    tr->o = std::move(o);
    tr->c = out.c;
    tr->tanh_c = std::move(tc);
    tr->h = out.h;
  }
  return out;
}

Vec head_forward(const DetectorParams& p, std::span<const double> h_in, const DetectorConfig& c, const Masks& masks,
                 HeadTrace* tr) {
  if (h_in.size() != c.d_model) throw DimensionError("classify: h length mismatch");
  Vec h(h_in.begin(), h_in.end());
  for (const HeadBlock& b : p.head) {
    Vec u = affine(b.w1, h, b.b1);
    Vec mask_u = masks.draw(u.size(), c.dropout_head);
    Vec hh(u.size());
    for (std::size_t k = 0; k < u.size(); ++k) hh[k] = gelu(u[k]) * mask_u[k];
    const Vec w = affine(b.w2, hh, b.b2);
    Vec mask_w = masks.draw(w.size(), c.dropout_head);
    Vec next = h;
    for (std::size_t k = 0; k < w.size(); ++k) next[k] += w[k] * mask_w[k];
    if (tr) tr->blocks.push_back({std::move(h), std::move(u), std::move(mask_u), std::move(hh), std::move(mask_w)});
    h = std::move(next);
  }
  Vec probs = softmax(affine(p.wg, h, p.bg));
  if (tr) {
    tr->h_final = std::move(h);
    tr->probs = probs;
  }
  return probs;
}

std::size_t class_index(TokenLabel l, HeadMode mode) {
  const auto i = static_cast<std::size_t>(l);
  if (mode == HeadMode::TwoWayMerged) return i == 0 ? 0 : 1;
  return i;
}

}  // namespace

Vec fuse(const DetectorParams& params, const TokenSignal& signal, const DetectorConfig& config) {
  config.validate();
  return fuse_forward(params, signal, config, Masks{}, nullptr);
}

DetectorState lstm_step(const DetectorParams& params, std::span<const double> z, const DetectorState& state,
                        const DetectorConfig& config) {
  return lstm_forward(params, z, state, config, nullptr);
}

Vec class_probabilities(const DetectorParams& params, std::span<const double> h, const DetectorConfig& config) {
  return head_forward(params, h, config, Masks{}, nullptr);
}

GdmVector gdm_from_probabilities(std::span<const double> probs, HeadMode mode) {
  if (mode == HeadMode::ThreeWay) {
    if (probs.size() != 3) throw DimensionError("gdm: expected 3 probabilities");
    return {probs[0], probs[1], probs[2]};
  }
  if (probs.size() != 2) throw DimensionError("gdm: expected 2 probabilities");
  return {probs[0], probs[1] / 2.0, probs[1] / 2.0};
}

GdmVector classify(const DetectorParams& params, std::span<const double> h, const DetectorConfig& config) {
  return gdm_from_probabilities(class_probabilities(params, h, config), config.head);
}

TokenLabel predicted_label(std::span<const double> probs, HeadMode mode) {
  const std::size_t k = argmax(probs);
  if (mode == HeadMode::TwoWayMerged) return k == 0 ? TokenLabel::Correct : TokenLabel::Unknown;
  return static_cast<TokenLabel>(k);
}

DetectorState initial_state(const DetectorConfig& config) {
  return DetectorState{Vec(config.d_model, 0.0), Vec(config.d_model, 0.0)};
}

Detector::Detector(DetectorConfig config, DetectorParams params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  const DetectorParams ref = DetectorParams::zeros(config_);
  auto same_shape = [](const Mat& a, const Mat& b) { return a.rows() == b.rows() && a.cols() == b.cols(); };
  bool ok = same_shape(params_.we, ref.we) && same_shape(params_.m1, ref.m1) && same_shape(params_.m2, ref.m2) &&
            same_shape(params_.wg, ref.wg) && params_.head.size() == ref.head.size() &&
            params_.ln_gamma.size() == ref.ln_gamma.size();
  if (ok && config_.use_lstm) ok = same_shape(params_.wx, ref.wx) && same_shape(params_.wh, ref.wh);
  for (std::size_t b = 0; ok && b < ref.head.size(); ++b) {
    ok = same_shape(params_.head[b].w1, ref.head[b].w1) && same_shape(params_.head[b].w2, ref.head[b].w2);
  }
  if (!ok) throw DimensionError("Detector: parameter shapes do not match config");
}

std::vector<Vec> predict_sequence(const DetectorParams& params, std::span<const TokenSignal> seq,
                                  const DetectorConfig& config) {
  std::vector<Vec> out;
  out.reserve(seq.size());
  DetectorState st = initial_state(config);
  for (const TokenSignal& s : seq) {
    const Vec z = fuse_forward(params, s, config, Masks{}, nullptr);
    st = lstm_forward(params, z, st, config, nullptr);
    out.push_back(head_forward(params, st.h, config, Masks{}, nullptr));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backprop

namespace {

struct StepTrace {
  FuseTrace fuse;
  LstmTrace lstm;
  HeadTrace head;
};

std::size_t labeled_count(std::span<const SignalSequence> seqs) {
  std::size_t n = 0;
  for (const auto& seq : seqs) {
    for (const auto& s : seq) n += s.label.has_value();
  }
  return n;
}

// Forward + backward for one sequence. Accumulates d(loss * scale) into grad
// and returns the summed (unscaled) cross-entropy over labeled tokens.
double sequence_backprop(const DetectorParams& p, const SignalSequence& seq, const DetectorConfig& c,
                         const Masks& masks, double scale, DetectorParams& grad) {
  const std::size_t d = c.d_model;
  std::vector<StepTrace> steps(seq.size());
  DetectorState st = initial_state(c);
  double loss = 0.0;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const Vec z = fuse_forward(p, seq[t], c, masks, &steps[t].fuse);
    st = lstm_forward(p, z, st, c, &steps[t].lstm);
    head_forward(p, st.h, c, masks, &steps[t].head);
    if (seq[t].label) {
      const double pr = steps[t].head.probs[class_index(*seq[t].label, c.head)];
      loss -= std::log(pr);
    }
  }

  Vec dh_next(d, 0.0);
  Vec dc_next(d, 0.0);
  for (std::size_t t = seq.size(); t-- > 0;) {
    StepTrace& tr = steps[t];
    // Head.
    Vec dh(d, 0.0);
    if (seq[t].label) {
      Vec dlogits = tr.head.probs;
      dlogits[class_index(*seq[t].label, c.head)] -= 1.0;
      scale_inplace(dlogits, scale);
      outer_acc(grad.wg, dlogits, tr.head.h_final);
      add_inplace(grad.bg, dlogits);
      matvec_transposed_acc(p.wg, dlogits, dh);
      for (std::size_t b = p.head.size(); b-- > 0;) {
        const HeadBlock& hb = p.head[b];
        HeadBlock& gb = grad.head[b];
        const BlockTrace& bt = tr.head.blocks[b];
        Vec dw(d);
        for (std::size_t k = 0; k < d; ++k) dw[k] = dh[k] * bt.mask_w[k];
        outer_acc(gb.w2, dw, bt.hh);
        add_inplace(gb.b2, dw);
        Vec dhh(bt.hh.size(), 0.0);
        matvec_transposed_acc(hb.w2, dw, dhh);
        Vec du(dhh.size());
        for (std::size_t k = 0; k < du.size(); ++k) du[k] = dhh[k] * bt.mask_u[k] * gelu_derivative(bt.u[k]);
        outer_acc(gb.w1, du, bt.h_in);
        add_inplace(gb.b1, du);
        matvec_transposed_acc(hb.w1, du, dh);
      }
    }

    // LSTM.
    Vec dz(d, 0.0);
    if (c.use_lstm) {
      const LstmTrace& l = tr.lstm;
      add_inplace(dh, dh_next);
      Vec dgates(4 * d);
      Vec dc(d);
      for (std::size_t k = 0; k < d; ++k) {
        const double dout = dh[k] * l.tanh_c[k];
        dc[k] = dc_next[k] + dh[k] * l.o[k] * (1.0 - l.tanh_c[k] * l.tanh_c[k]);
        const double di = dc[k] * l.g[k];
        const double dg = dc[k] * l.i[k];
        const double df = dc[k] * l.c_prev[k];
        dgates[k] = di * l.i[k] * (1.0 - l.i[k]);
        dgates[d + k] = df * l.f[k] * (1.0 - l.f[k]);
        dgates[2 * d + k] = dg * (1.0 - l.g[k] * l.g[k]);
        dgates[3 * d + k] = dout * l.o[k] * (1.0 - l.o[k]);
        dc_next[k] = dc[k] * l.f[k];
      }
      outer_acc(grad.wx, dgates, tr.fuse.z);
      outer_acc(grad.wh, dgates, l.h_prev);
      add_inplace(grad.lb, dgates);
      matvec_transposed_acc(p.wx, dgates, dz);
      std::fill(dh_next.begin(), dh_next.end(), 0.0);
      matvec_transposed_acc(p.wh, dgates, dh_next);
    } else {
      dz = dh;
    }

    // Layer norm.
    const FuseTrace& f = tr.fuse;
    Vec dxhat(d);
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      grad.ln_gamma[k] += dz[k] * f.xhat[k];
      grad.ln_beta[k] += dz[k];
      dxhat[k] = dz[k] * p.ln_gamma[k];
      mean_dxhat += dxhat[k];
      mean_dxhat_xhat += dxhat[k] * f.xhat[k];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    Vec ds(d);
    for (std::size_t k = 0; k < d; ++k) ds[k] = f.inv_std * (dxhat[k] - mean_dxhat - f.xhat[k] * mean_dxhat_xhat);

    if (c.use_se) {
      Vec da(d);
      for (std::size_t k = 0; k < d; ++k) da[k] = ds[k] * f.mask_e[k] * gelu_derivative(f.a_e[k]);
      outer_acc(grad.we, da, f.x);
      add_inplace(grad.be, da);
    }
    if (c.use_logm) {
      add_inplace(grad.mb2, ds);
      outer_acc(grad.m2, ds, f.d1);
      Vec dd1(c.mlp_dim, 0.0);
      matvec_transposed_acc(p.m2, ds, dd1);
      for (std::size_t k = 0; k < c.mlp_dim; ++k) {
        const double da1 = dd1[k] * f.mask1[k] * gelu_derivative(f.a1[k]);
        grad.m1(k, 0) += da1 * f.margin;
        grad.mb1[k] += da1;
      }
    }
  }
  return loss;
}

double batch_loss(const DetectorParams& p, std::span<const SignalSequence> seqs, const DetectorConfig& c) {
  double loss = 0.0;
  for (const auto& seq : seqs) {
    const auto probs = predict_sequence(p, seq, c);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      if (seq[t].label) loss -= std::log(probs[t][class_index(*seq[t].label, c.head)]);
    }
  }
  return loss;
}

}  // namespace

double sequence_loss(const DetectorParams& params, std::span<const SignalSequence> seqs,
                     const DetectorConfig& config) {
  const std::size_t n = labeled_count(seqs);
  if (n == 0) throw std::invalid_argument("sequence_loss: no labeled tokens");
  return batch_loss(params, seqs, config) / static_cast<double>(n);
}

DetectorParams loss_gradient(const DetectorParams& params, std::span<const SignalSequence> seqs,
                             const DetectorConfig& config) {
  const std::size_t n = labeled_count(seqs);
  if (n == 0) throw std::invalid_argument("loss_gradient: no labeled tokens");
  DetectorParams grad = DetectorParams::zeros(config);
  for (const auto& seq : seqs) sequence_backprop(params, seq, config, Masks{}, 1.0 / static_cast<double>(n), grad);
  return grad;
}

double validation_f1(const DetectorParams& params, std::span<const SignalSequence> seqs,
                     const DetectorConfig& config) {
  std::vector<TokenLabel> pred, gold;
  for (const auto& seq : seqs) {
    const auto probs = predict_sequence(params, seq, config);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      if (!seq[t].label) continue;
      pred.push_back(predicted_label(probs[t], config.head));
      gold.push_back(*seq[t].label);
    }
  }
  if (gold.empty()) throw std::invalid_argument("validation_f1: no labeled tokens");
  return detector_metrics(pred, gold, config.head == HeadMode::TwoWayMerged).f1;
}

TrainingResult train(const DetectorConfig& config, std::span<const SignalSequence> train_set,
                     std::span<const SignalSequence> val_set,
                     const std::function<void(const EpochReport&)>& progress) {
  config.validate();
  if (labeled_count(train_set) == 0) throw std::invalid_argument("train: training set has no labeled tokens");
  if (labeled_count(val_set) == 0) throw std::invalid_argument("train: validation set has no labeled tokens");

  DetectorParams params = DetectorParams::init(config);
  DetectorParams velocity = DetectorParams::zeros(config);

  TrainingResult result;
  result.params = params;
  result.best_f1 = validation_f1(params, val_set, config);
  result.report.push_back({0, sequence_loss(params, train_set, config), result.best_f1});
  if (progress) progress(result.report.back());

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto shuffle_rng = seeded_engine({config.seed, 0x5u, epoch});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += config.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::size_t n = 0;
      for (std::size_t i = start; i < end; ++i) n += labeled_count(std::span(&train_set[order[i]], 1));
      if (n == 0) continue;
      auto mask_rng = seeded_engine({config.seed, 0xd0u, epoch, batch});
      const Masks masks{&mask_rng};
      DetectorParams grad = DetectorParams::zeros(config);
      double loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        loss += sequence_backprop(params, train_set[order[i]], config, masks, 1.0 / static_cast<double>(n), grad);
      }
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "train: non-finite loss at epoch " << epoch << ", batch " << batch << " (lr " << config.learning_rate
            << ")";
        throw TrainingError(msg.str());
      }
      epoch_loss += loss;
      epoch_tokens += n;
      auto pv = params.tensors(config);
      auto vv = velocity.tensors(config);
      auto gv = grad.tensors(config);
      for (std::size_t k = 0; k < pv.size(); ++k) {
        for (std::size_t j = 0; j < pv[k].data.size(); ++j) {
          vv[k].data[j] = config.momentum * vv[k].data[j] + gv[k].data[j];
          pv[k].data[j] -= config.learning_rate * vv[k].data[j];
        }
      }
    }
    if (epoch % config.eval_every != 0 && epoch != config.epochs) continue;
    EpochReport row{epoch, epoch_tokens ? epoch_loss / static_cast<double>(epoch_tokens) : 0.0,
                    validation_f1(params, val_set, config)};
    result.report.push_back(row);
    if (progress) progress(row);
    if (row.val_f1 > result.best_f1) {
      result.best_f1 = row.val_f1;
      result.best_epoch = epoch;
      result.params = params;
    }
  }
  return result;
}

double grad_check(const DetectorConfig& config, const DetectorParams& params, std::span<const SignalSequence> sample,
                  double step) {
  DetectorParams analytic = loss_gradient(params, sample, config);
  DetectorParams probe = params;
  auto pv = probe.tensors(config);
  auto av = analytic.tensors(config);
  double worst = 0.0;
  for (std::size_t k = 0; k < pv.size(); ++k) {
    for (std::size_t j = 0; j < pv[k].data.size(); ++j) {
      const double orig = pv[k].data[j];
      pv[k].data[j] = orig + step;
      const double up = sequence_loss(probe, sample, config);
      pv[k].data[j] = orig - step;
      const double down = sequence_loss(probe, sample, config);
      pv[k].data[j] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = av[k].data[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace utaca
