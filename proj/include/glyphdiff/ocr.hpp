#pragma once

#include <string>
#include <vector>

#include "glyphdiff/font.hpp"
#include "glyphdiff/image.hpp"
#include "glyphdiff/nn.hpp"
#include "glyphdiff/rng.hpp"
#include "glyphdiff/tensor.hpp"

namespace glyphdiff {

struct OcrConfig {
  std::vector<int> channels = {8, 16, 32, 64, 128};
  int d_neck = 64;
};

template <typename T>
struct Pyramid {
  std::vector<Tensor<T>> maps;  // x_1 .. x_5, channels per OcrConfig
};

template <typename T>
struct LocalFeatures {
  Tensor<T> backbone;  // l_b: N x C_5
  Tensor<T> neck;      // l_n: N x d_neck
  std::string text;
  bool truncated = false;
  std::vector<bool> slot_mask;
};

template <typename T>
struct GlobalFeatures {
  Pyramid<T> pyramid;
  Tensor<T> neck;  // g_n: 1 x d_neck
};

template <typename T>
inline Tensor<T> tensor_from_image(const GrayImage& img) {
  std::vector<T> v(img.pix.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(img.pix[i]);
  return Tensor<T>::from_data({1, img.h, img.w}, std::move(v));
}

// Recognizer: 5-stage conv backbone, height-collapsed conv neck, fixed-slot
// classifier head. Pretrained once, then frozen and reused as the feature
// extractor for both guidance streams and as the evaluation reader.
template <typename T>
class OcrModel {
 public:
  OcrModel(const OcrConfig& cfg, const RenderSpec& spec, Rng& rng)
      : cfg_(cfg), spec_(spec), alphabet_(FontAtlas::builtin().alphabet()) {
    if (cfg_.channels.size() != 5)
      throw std::invalid_argument("ocr: backbone wants exactly 5 stage widths");
    int in = 1;
    for (std::size_t s = 0; s < cfg_.channels.size(); ++s) {
      const int out = cfg_.channels[s];
      const int stride = s == 0 ? 1 : 2;
      const std::string p = "ocr.backbone.stage" + std::to_string(s + 1);
      stages_.push_back({Conv2d<T>(params_, p + ".conv1", in, out, 3, stride, 1, rng),
                         Conv2d<T>(params_, p + ".conv2", out, out, 3, 1, 1, rng)});
      in = out;
    }
    neck1_ = Conv2d<T>(params_, "ocr.neck.conv1", cfg_.channels.back(), cfg_.d_neck, 1, 3, 1, 0, 1, rng);
    neck2_ = Conv2d<T>(params_, "ocr.neck.conv2", cfg_.d_neck, cfg_.d_neck, 1, 3, 1, 0, 1, rng);
    head_ = Linear<T>(params_, "ocr.head.fc", cfg_.d_neck, num_classes(), rng);
  }

  const OcrConfig& config() const { return cfg_; }
  const RenderSpec& render_spec() const { return spec_; }
  const std::string& alphabet() const { return alphabet_; }
  int num_classes() const { return static_cast<int>(alphabet_.size()) + 1; }
  int pad_class() const { return static_cast<int>(alphabet_.size()); }
  int slots() const { return spec_.max_chars; }

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  bool frozen() const { return frozen_; }
  void set_frozen(bool f) {
    frozen_ = f;
    for (auto& [name, t] : params_.all_mutable()) t.set_requires_grad(!f);
  }

  Pyramid<T> backbone_forward(const Tensor<T>& img) const {
    check(img.rank() == 3 && img.dim(0) == 1, "ocr.backbone",
          "expects a 1xHxW image, got " + shape_str(img.shape()));
    check(img.dim(1) >= 16 && img.dim(2) >= 16, "ocr.backbone",
          "input must be at least 16x16, got " + shape_str(img.shape()));
    Pyramid<T> p;
    Tensor<T> x = img;
    for (const auto& st : stages_) {
      x = relu(st.conv1.forward(x));
      x = relu(st.conv2.forward(x));
      p.maps.push_back(x);
    }
    return p;
  }

  // width-indexed sequence of d_neck vectors from x_5
  Tensor<T> neck_forward(const Pyramid<T>& p) const {
    check(p.maps.size() == 5, "ocr.neck", "pyramid must carry 5 maps");
    const Tensor<T>& x5 = p.maps.back();
    const int c = x5.dim(0), w = x5.dim(2);
    Tensor<T> collapsed = mean_pool(x5, 1);          // C x W
    Tensor<T> seq = reshape(collapsed, {c, 1, w});   // as 1-D conv input
    seq = relu(neck1_.forward(seq));
    seq = relu(neck2_.forward(seq));
    seq = reshape(seq, {cfg_.d_neck, w});
    return transpose(seq);  // W x d_neck
  }

  // per-slot class logits; the neck sequence is adaptively mean-pooled to
  // the slot count along width
  Tensor<T> head_forward(const Tensor<T>& neck_seq) const {
    const int w = neck_seq.dim(0), d = neck_seq.dim(1);
    check(w >= slots(), "ocr.head",
          "neck sequence width " + std::to_string(w) + " below slot count");
    Tensor<T> cols = transpose(neck_seq);                       // d x W
    cols = adaptive_avg_pool2d(reshape(cols, {d, 1, w}), 1, slots());
    Tensor<T> per_slot = transpose(reshape(cols, {d, slots()}));  // slots x d
    return head_.forward(per_slot);
  }

  Tensor<T> logits_for_image(const GrayImage& img) const {
    return head_forward(neck_forward(backbone_forward(tensor_from_image<T>(img))));
  }

  // greedy slot decoding: argmax per slot, ties toward the lower class
  // index, pad terminates
  std::string decode(const Tensor<T>& logits) const {
    check(logits.rank() == 2 && logits.dim(1) == num_classes(), "ocr.decode",
          "logits shape mismatch: " + shape_str(logits.shape()));
    std::string out;
    const auto& v = logits.data();
    for (int s = 0; s < logits.dim(0); ++s) {
      int best = 0;
      T best_v = v[static_cast<std::size_t>(s) * num_classes()];
      for (int c = 1; c < num_classes(); ++c) {
        const T x = v[static_cast<std::size_t>(s) * num_classes() + c];
        if (x > best_v) {
          best_v = x;
          best = c;
        }
      }
      if (best == pad_class()) break;
      out.push_back(alphabet_[static_cast<std::size_t>(best)]);
    }
    return out;
  }

  std::string read_image(const GrayImage& img) const {
    NoGradGuard ng;
    return decode(logits_for_image(img));
  }

  // l_b row i: spatial mean of character i's x_5; l_n row i: mean over the
  // character's neck sequence. Runs grad-free on the frozen extractor.
  LocalFeatures<T> extract_local(const std::string& text) const {
    NoGradGuard ng;
    GlyphImages glyphs = render_line(text, spec_);
    LocalFeatures<T> out;
    out.text = glyphs.text;
    out.truncated = glyphs.truncated;
    out.slot_mask = glyphs.slot_mask;
    std::vector<Tensor<T>> brows, nrows;
    for (const auto& g : glyphs.local) {
      Pyramid<T> p = backbone_forward(tensor_from_image<T>(g));
      const Tensor<T>& x5 = p.maps.back();
      Tensor<T> pooled = mean_pool(mean_pool(x5, 2), 1);  // C
      brows.push_back(reshape(pooled, {1, x5.dim(0)}));
      Tensor<T> seq = neck_forward(p);                    // W x d_neck
      nrows.push_back(reshape(mean_pool(seq, 0), {1, cfg_.d_neck}));
    }
    out.backbone = concat(brows, 0);
    out.neck = concat(nrows, 0);
    return out;
  }

  // pyramid of the unified line image plus g_n, the neck-sequence mean
  GlobalFeatures<T> extract_global(const std::string& text) const {
    NoGradGuard ng;
    GlyphImages glyphs = render_line(text, spec_);
    GlobalFeatures<T> out;
    out.pyramid = backbone_forward(tensor_from_image<T>(glyphs.line));
    Tensor<T> seq = neck_forward(out.pyramid);
    out.neck = reshape(mean_pool(seq, 0), {1, cfg_.d_neck});
    return out;
  }

 private:
  struct Stage {
    Conv2d<T> conv1, conv2;
  };

  OcrConfig cfg_;
  RenderSpec spec_;
  std::string alphabet_;
  ParamStore<T> params_;
  std::vector<Stage> stages_;
  Conv2d<T> neck1_, neck2_;
  Linear<T> head_;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// pretraining

struct OcrPretrainOptions {
  int train_lines = 6000;
  int holdout_lines = 1000;
  int epochs = 10;
  int batch = 16;
  double lr = 2e-4;
  double target_accuracy = 0.98;  // held-out exact-sequence accuracy gate
  bool augment = true;
};

struct OcrPretrainReport {
  bool converged = false;
  double holdout_accuracy = 0.0;
  double initial_loss = 0.0;
  double first_epoch_loss = 0.0;
  std::vector<double> epoch_losses;
  int epochs_run = 0;
  std::string message;
};

std::string random_text(Rng& rng, int min_len, int max_len, bool allow_space = false);

// left-aligned line occupying its first slots, optionally sheared and
// restyled the way scene crops look after rectification
GrayImage make_training_line(const std::string& text, const RenderSpec& spec, Rng& rng,
                             bool augment);

template <typename T>
OcrPretrainReport pretrain_ocr(OcrModel<T>& model, const OcrPretrainOptions& opts, Rng& rng) {
  OcrPretrainReport report;
  const RenderSpec& spec = model.render_spec();

  struct Sample {
    GrayImage img;
    std::vector<int> targets;
  };
  auto targets_of = [&](const std::string& text) {
    std::vector<int> t(static_cast<std::size_t>(model.slots()), model.pad_class());
    const auto& atlas = FontAtlas::builtin();
    for (std::size_t i = 0; i < text.size(); ++i) t[i] = atlas.index_of(text[i]);
    return t;
  };

  std::vector<Sample> train;
  train.reserve(static_cast<std::size_t>(opts.train_lines));
  for (int i = 0; i < opts.train_lines; ++i) {
    std::string text = random_text(rng, 1, spec.max_chars, true);
    train.push_back({make_training_line(text, spec, rng, opts.augment), targets_of(text)});
  }
  std::vector<std::pair<GrayImage, std::string>> holdout;
  for (int i = 0; i < opts.holdout_lines; ++i) {
    std::string text = random_text(rng, 1, spec.max_chars, true);
    holdout.push_back({render_line(text, spec).line, text});
  }

  auto batch_loss = [&](std::size_t begin, std::size_t end) {
    std::vector<Tensor<T>> losses;
    for (std::size_t i = begin; i < end; ++i) {
      Tensor<T> logits = model.logits_for_image(train[i].img);
      losses.push_back(cross_entropy(softmax(logits), train[i].targets));
    }
    Tensor<T> total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    return scale(total, T(1) / static_cast<T>(losses.size()));
  };

  auto holdout_accuracy = [&]() {
    NoGradGuard ng;
    int hits = 0;
    for (const auto& [img, text] : holdout)
      if (model.decode(model.logits_for_image(img)) == text) ++hits;
    return static_cast<double>(hits) / static_cast<double>(holdout.size());
  };

  {
    NoGradGuard ng;
    report.initial_loss = static_cast<double>(batch_loss(0, std::min<std::size_t>(64, train.size())).item());
  }

  Adam<T> opt(opts.lr);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    // deterministic shuffle
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_index(i)]);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b + 1 <= train.size(); b += static_cast<std::size_t>(opts.batch)) {
      const std::size_t end = std::min(train.size(), b + static_cast<std::size_t>(opts.batch));
      std::vector<Tensor<T>> losses;
      for (std::size_t i = b; i < end; ++i) {
        Tensor<T> logits = model.logits_for_image(train[order[i]].img);
        losses.push_back(cross_entropy(softmax(logits), train[order[i]].targets));
      }
      Tensor<T> total = losses[0];
      for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
      total = scale(total, T(1) / static_cast<T>(losses.size()));
      model.params().zero_grad();
      backward(total);
      opt.step(model.params());
      epoch_loss += static_cast<double>(total.item());
      ++batches;
    }
    epoch_loss /= static_cast<double>(batches);
    report.epoch_losses.push_back(epoch_loss);
    if (epoch == 0) report.first_epoch_loss = epoch_loss;
    report.epochs_run = epoch + 1;
    report.holdout_accuracy = holdout_accuracy();
    if (report.holdout_accuracy >= 0.995 && epoch >= 1) break;  // early stop
  }

  report.converged = report.holdout_accuracy >= opts.target_accuracy;
  if (!report.converged) {
    report.message = "pretraining failed to reach " + std::to_string(opts.target_accuracy) +
                     " held-out exact-sequence accuracy (got " +
                     std::to_string(report.holdout_accuracy) + " after " +
                     std::to_string(report.epochs_run) + " epochs)";
  }
  if (report.converged) model.set_frozen(true);
  return report;
}

}  // namespace glyphdiff
