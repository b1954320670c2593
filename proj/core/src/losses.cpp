#include "sartm/losses.hpp"

#include <algorithm>
#include <cmath>

SARTM_NS_BEGIN

LabelMap downsample_nearest(const LabelMap& src, int64_t h, int64_t w) {
  LabelMap out;
  out.height = h;
  out.width = w;
  out.values.resize(static_cast<size_t>(h * w));
  for (int64_t y = 0; y < h; ++y) {
    const int64_t sy = (2 * y + 1) * src.height / (2 * h);
    for (int64_t x = 0; x < w; ++x) {
      const int64_t sx = (2 * x + 1) * src.width / (2 * w);
      out.values[static_cast<size_t>(y * w + x)] = src.at(sy, sx);
    }
  }
  return out;
}

namespace {

// Per-pixel log-softmax statistics computed in double precision.
struct PixelCE {
  int64_t pixel;
  double ce;
  double p_true;
};

void softmax_probs(const Scalar* logits, int64_t num_classes, int64_t stride,
                   double* probs) {
  double mx = logits[0];
  for (int64_t c = 1; c < num_classes; ++c)
    mx = std::max(mx, static_cast<double>(logits[c * stride]));
  double denom = 0;
  for (int64_t c = 0; c < num_classes; ++c) {
    probs[c] = std::exp(static_cast<double>(logits[c * stride]) - mx);
    denom += probs[c];
  }
  for (int64_t c = 0; c < num_classes; ++c) probs[c] /= denom;
}

}  // namespace

LossValue ohem_ce(const Tensor& logits, const LabelMap& labels, double threshold) {
  const Shape& s = logits.shape();
  if (s.size() != 3 || s[1] != labels.height || s[2] != labels.width) {
    throw ShapeError("ohem_ce: logits " + shape_str(s) + " vs labels " +
                     std::to_string(labels.height) + "x" +
                     std::to_string(labels.width));
  }
  const int64_t num_classes = s[0];
  const int64_t t = labels.numel();
  const auto& xv = logits.data();

  std::vector<PixelCE> valid;
  valid.reserve(static_cast<size_t>(t));
  std::vector<double> probs(static_cast<size_t>(num_classes));
  int64_t n_hard = 0;
  for (int64_t p = 0; p < t; ++p) {
    const int32_t label = labels.values[static_cast<size_t>(p)];
    if (label == kIgnoreLabel) continue;
    if (label < 0 || label >= num_classes) {
      throw ContractError("ohem_ce: label " + std::to_string(label) +
                          " outside [0, " + std::to_string(num_classes) + ")");
    }
    softmax_probs(xv.data() + p, num_classes, t, probs.data());
    const double pt = probs[static_cast<size_t>(label)];
    valid.push_back({p, -std::log(pt), pt});
    if (pt < threshold) ++n_hard;
  }

  if (valid.empty()) {
    return {Tensor::scalar(0), true};
  }
  const int64_t n_threshold = static_cast<int64_t>(valid.size()) / 16;
  const int64_t n_min = std::max(n_hard, n_threshold);
  if (n_min == 0) {
    return {Tensor::scalar(0), false};
  }

  std::sort(valid.begin(), valid.end(), [](const PixelCE& a, const PixelCE& b) {
    if (a.ce != b.ce) return a.ce > b.ce;
    return a.pixel < b.pixel;
  });
  double acc = 0;
  std::vector<int64_t> selected(static_cast<size_t>(n_min));
  for (int64_t i = 0; i < n_min; ++i) {
    acc += valid[static_cast<size_t>(i)].ce;
    selected[static_cast<size_t>(i)] = valid[static_cast<size_t>(i)].pixel;
  }
  Tensor loss = Tensor::scalar(static_cast<Scalar>(acc / static_cast<double>(n_min)));

  if (autograd_recording({&logits})) {
    auto xi = logits.impl();
    auto oi = loss.impl();
    LabelMap lcopy = labels;
    autograd_record(loss, [xi, oi, lcopy, selected, num_classes, t, n_min] {
      const Scalar g = oi->grad[0];
      auto& gx = xi->ensure_grad();
      std::vector<double> probs(static_cast<size_t>(num_classes));
      const double inv = 1.0 / static_cast<double>(n_min);
      for (int64_t p : selected) {
        softmax_probs(xi->data.data() + p, num_classes, t, probs.data());
        const int32_t label = lcopy.values[static_cast<size_t>(p)];
        for (int64_t c = 0; c < num_classes; ++c) {
          double d = probs[static_cast<size_t>(c)] - (c == label ? 1.0 : 0.0);
          gx[static_cast<size_t>(c * t + p)] += static_cast<Scalar>(g * inv * d);
        }
      }
    });
  }
  return {loss, false};
}

LossValue masked_ce_mean(const Tensor& logits, const std::vector<int32_t>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != static_cast<int64_t>(labels.size())) {
    throw ShapeError("masked_ce_mean: logits " + shape_str(s) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const int64_t rows = s[0], num_classes = s[1];
  const auto& xv = logits.data();

  std::vector<int64_t> valid;
  for (int64_t r = 0; r < rows; ++r) {
    const int32_t label = labels[static_cast<size_t>(r)];
    if (label == kIgnoreLabel) continue;
    if (label < 0 || label >= num_classes) {
      throw ContractError("masked_ce_mean: label " + std::to_string(label) +
                          " outside [0, " + std::to_string(num_classes) + ")");
    }
    valid.push_back(r);
  }
  if (valid.empty()) return {Tensor::scalar(0), true};

  std::vector<double> probs(static_cast<size_t>(num_classes));
  double acc = 0;
  for (int64_t r : valid) {
    softmax_probs(xv.data() + r * num_classes, num_classes, 1, probs.data());
    acc -= std::log(probs[static_cast<size_t>(labels[static_cast<size_t>(r)])]);
  }
  Tensor loss =
      Tensor::scalar(static_cast<Scalar>(acc / static_cast<double>(valid.size())));

  if (autograd_recording({&logits})) {
    auto xi = logits.impl();
    auto oi = loss.impl();
    std::vector<int32_t> lcopy = labels;
    autograd_record(loss, [xi, oi, lcopy, valid, num_classes] {
      const Scalar g = oi->grad[0];
      auto& gx = xi->ensure_grad();
      std::vector<double> probs(static_cast<size_t>(num_classes));
      const double inv = 1.0 / static_cast<double>(valid.size());
      for (int64_t r : valid) {
        softmax_probs(xi->data.data() + r * num_classes, num_classes, 1,
                      probs.data());
        const int32_t label = lcopy[static_cast<size_t>(r)];
        for (int64_t c = 0; c < num_classes; ++c) {
          double d = probs[static_cast<size_t>(c)] - (c == label ? 1.0 : 0.0);
          gx[static_cast<size_t>(r * num_classes + c)] +=
              static_cast<Scalar>(g * inv * d);
        }
      }
    });
  }
  return {loss, false};
}

ClassPrototypes mask_average_pool(const Tensor& features, const LabelMap& labels,
                                  int num_classes) {
  const Shape& s = features.shape();
  if (s.size() != 3) {
    throw ShapeError("mask_average_pool: expected [d,H,W], got " + shape_str(s));
  }
  const int64_t d = s[0], h = s[1], w = s[2];
  const int64_t t = h * w;
  LabelMap y = (labels.height == h && labels.width == w)
                   ? labels
                   : downsample_nearest(labels, h, w);

  std::vector<double> acc(static_cast<size_t>(num_classes * d), 0.0);
  std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
  const auto& fv = features.data();
  for (int64_t p = 0; p < t; ++p) {
    const int32_t label = y.values[static_cast<size_t>(p)];
    if (label == kIgnoreLabel) continue;
    if (label < 0 || label >= num_classes) {
      throw ContractError("mask_average_pool: label " + std::to_string(label) +
                          " outside [0, " + std::to_string(num_classes) + ")");
    }
    ++counts[static_cast<size_t>(label)];
    for (int64_t c = 0; c < d; ++c) {
      acc[static_cast<size_t>(label * d + c)] += fv[static_cast<size_t>(c * t + p)];
    }
  }

  ClassPrototypes out;
  out.counts = counts;
  out.present.resize(static_cast<size_t>(num_classes));
  out.features = Tensor::zeros({static_cast<int64_t>(num_classes), d});
  auto& pv = out.features.data_mut();
  for (int64_t k = 0; k < num_classes; ++k) {
    out.present[static_cast<size_t>(k)] = counts[static_cast<size_t>(k)] > 0;
    if (counts[static_cast<size_t>(k)] == 0) continue;
    const double inv = 1.0 / static_cast<double>(counts[static_cast<size_t>(k)]);
    for (int64_t c = 0; c < d; ++c) {
      pv[static_cast<size_t>(k * d + c)] =
          static_cast<Scalar>(acc[static_cast<size_t>(k * d + c)] * inv);
    }
  }

  if (autograd_recording({&features})) {
    auto fi = features.impl();
    auto oi = out.features.impl();
    autograd_record(out.features, [fi, oi, y, counts, num_classes, d, t] {
      const auto& g = oi->grad;
      auto& gf = fi->ensure_grad();
      for (int64_t p = 0; p < t; ++p) {
        const int32_t label = y.values[static_cast<size_t>(p)];
        if (label == kIgnoreLabel) continue;
        const double inv =
            1.0 / static_cast<double>(counts[static_cast<size_t>(label)]);
        for (int64_t c = 0; c < d; ++c) {
          gf[static_cast<size_t>(c * t + p)] += static_cast<Scalar>(
              g[static_cast<size_t>(label * d + c)] * inv);
        }
      }
    });
  }
  return out;
}

LossValue l_cr(const Tensor& features, const LabelMap& labels,
               const Tensor& classifier) {
  const Shape& s = features.shape();
  if (s.size() != 3 || classifier.rank() != 2 || classifier.dim(0) != s[0]) {
    throw ShapeError("l_cr: features " + shape_str(s) + " vs classifier " +
                     shape_str(classifier.shape()));
  }
  const int64_t h = s[1], w = s[2];
  LabelMap y = (labels.height == h && labels.width == w)
                   ? labels
                   : downsample_nearest(labels, h, w);
  Tensor tokens = reshape(permute(features, {1, 2, 0}), {h * w, s[0]});
  Tensor logits = matmul(tokens, classifier);
  return masked_ce_mean(logits, y.values);
}

LossValue l_se(const ClassPrototypes& prototypes, const Tensor& teacher,
               double tau) {
  const int64_t num_classes = prototypes.features.dim(0);
  if (teacher.rank() != 2 || teacher.dim(0) != num_classes) {
    throw ShapeError("l_se: teacher " + shape_str(teacher.shape()) +
                     " vs prototypes " + shape_str(prototypes.features.shape()));
  }
  std::vector<int64_t> present;
  for (int64_t k = 0; k < num_classes; ++k) {
    if (prototypes.present[static_cast<size_t>(k)]) present.push_back(k);
  }
  if (present.size() < 2) return {Tensor::scalar(0), true};

  std::vector<Tensor> srows, trows;
  for (int64_t k : present) {
    srows.push_back(slice(prototypes.features, 0, k, 1));
    trows.push_back(slice(teacher, 0, k, 1));
  }
  Tensor student = concat(srows, 0);
  Tensor teacher_sub = concat(trows, 0);

  const Scalar inv_tau = static_cast<Scalar>(1.0 / tau);
  Tensor qs = softmax(
      mul_scalar(cosine_similarity_matrix(student, student), inv_tau), 1);
  Tensor pt = softmax(
      mul_scalar(cosine_similarity_matrix(teacher_sub, teacher_sub), inv_tau), 1);
  return {kl_div_rows(pt, qs), false};
}

LossBreakdown total_loss(const Tensor& s0, const Tensor& s1,
                         const LabelMap& labels, const Tensor& fused_sfm,
                         const Tensor& teacher, const Tensor& classifier,
                         const LossWeights& w, double ohem_threshold, double tau) {
  if (s0.shape() != s1.shape()) {
    throw ShapeError("total_loss: head shapes differ " + shape_str(s0.shape()) +
                     " vs " + shape_str(s1.shape()));
  }
  const int64_t h0 = s0.dim(1), w0 = s0.dim(2);
  if (labels.height % h0 != 0 || labels.width % w0 != 0 ||
      labels.height / h0 != labels.width / w0) {
    throw ShapeError("total_loss: labels " + std::to_string(labels.height) + "x" +
                     std::to_string(labels.width) +
                     " not an integral upscale of logits " + shape_str(s0.shape()));
  }
  const int factor = static_cast<int>(labels.height / h0);

  Tensor s0_full = factor > 1 ? bilinear_upsample(s0, factor) : s0;
  Tensor s1_full = factor > 1 ? bilinear_upsample(s1, factor) : s1;
  LossValue ce0 = ohem_ce(s0_full, labels, ohem_threshold);
  LossValue ce1 = ohem_ce(s1_full, labels, ohem_threshold);
  LossValue cr = l_cr(fused_sfm, labels, classifier);
  ClassPrototypes proto =
      mask_average_pool(fused_sfm, labels, static_cast<int>(classifier.dim(1)));
  LossValue se = l_se(proto, teacher, tau);

  LossBreakdown out;
  out.ce0 = ce0.loss.value();
  out.ce1 = ce1.loss.value();
  out.cr = cr.loss.value();
  out.se = se.loss.value();
  out.warn_ce = ce0.warning || ce1.warning;
  out.warn_cr = cr.warning;
  out.warn_se = se.warning;
  out.total = mul_scalar(ce0.loss, static_cast<Scalar>(w.w0)) +
              mul_scalar(ce1.loss, static_cast<Scalar>(w.w1)) +
              mul_scalar(cr.loss, static_cast<Scalar>(w.w2)) +
              mul_scalar(se.loss, static_cast<Scalar>(w.w3));
  return out;
}

SARTM_NS_END
