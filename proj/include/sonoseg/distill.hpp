#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sonoseg/checkpoint.hpp"
#include "sonoseg/data.hpp"
#include "sonoseg/decoder.hpp"
#include "sonoseg/encoder.hpp"
#include "sonoseg/losses.hpp"
#include "sonoseg/optim.hpp"
#include "sonoseg/rng.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

// The three observables distilled per stage: the stage output (block +
// adapter), the transformer block alone, and the adapter alone.
enum class TapLevel { integration = 0, block = 1, adapter = 2 };

inline constexpr std::array<TapLevel, 3> kAllTapLevels = {TapLevel::integration, TapLevel::block,
                                                          TapLevel::adapter};

inline const char* tap_level_name(TapLevel t) {
  switch (t) {
    case TapLevel::integration: return "integration";
    case TapLevel::block: return "block";
    case TapLevel::adapter: return "adapter";
  }
  return "?";
}

// Accepts the functional names and the D1/D2/D3 shorthand used in configs.
inline TapLevel parse_tap_level(const std::string& s) {
  if (s == "integration" || s == "D1" || s == "d1") return TapLevel::integration;
  if (s == "block" || s == "D2" || s == "d2") return TapLevel::block;
  if (s == "adapter" || s == "D3" || s == "d3") return TapLevel::adapter;
  throw ConfigError("unknown distillation level '" + s +
                    "' (want integration|block|adapter or D1|D2|D3)");
}

inline const Tensor& pick_tap(const StageTaps& taps, TapLevel t) {
  switch (t) {
    case TapLevel::integration: return taps.integration;
    case TapLevel::block: return taps.block_out;
    case TapLevel::adapter: return taps.adapter_out;
  }
  throw ContractViolation("bad tap level");
}

// Dimensional adapter from a student tap to the matching teacher tap: a 3x3
// conv in student width followed by a 1x1 projection up to teacher width.
struct Neck {
  Tensor conv3_w, conv3_b;
  Tensor conv1_w, conv1_b;

  Neck() = default;
  Neck(int64_t student_dim, int64_t teacher_dim, Rng& rng)
      : conv3_w(detail::trunc_normal_tensor({student_dim, student_dim, 3, 3}, rng)),
        conv3_b(Tensor::zeros({student_dim}, true)),
        conv1_w(detail::trunc_normal_tensor({teacher_dim, student_dim, 1, 1}, rng)),
        conv1_b(Tensor::zeros({teacher_dim}, true)) {}

  // Exact pass-through (delta kernel + unit projection); needs equal widths.
  static Neck identity(int64_t dim) {
    Neck n;
    std::vector<double> k3(static_cast<size_t>(dim * dim * 9), 0.0);
    for (int64_t c = 0; c < dim; ++c) k3[static_cast<size_t>((c * dim + c) * 9 + 4)] = 1.0;
    n.conv3_w = Tensor::from_data({dim, dim, 3, 3}, std::move(k3), true);
    n.conv3_b = Tensor::zeros({dim}, true);
    std::vector<double> k1(static_cast<size_t>(dim * dim), 0.0);
    for (int64_t c = 0; c < dim; ++c) k1[static_cast<size_t>(c * dim + c)] = 1.0;
    n.conv1_w = Tensor::from_data({dim, dim, 1, 1}, std::move(k1), true);
    n.conv1_b = Tensor::zeros({dim}, true);
    return n;
  }

  Tensor forward(const Tensor& x) const {
    return conv2d(conv2d(x, conv3_w, conv3_b, 1, 1), conv1_w, conv1_b, 1, 0);
  }

  void params(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "conv3.w", conv3_w});
    out.push_back({prefix + "conv3.b", conv3_b});
    out.push_back({prefix + "conv1.w", conv1_w});
    out.push_back({prefix + "conv1.b", conv1_b});
  }
};

// One neck per (stage, level); nine in total.
struct NeckSet {
  std::array<std::array<Neck, 3>, 3> at;  // [stage][level]

  NeckSet() = default;
  NeckSet(const EncoderConfig& student, const EncoderConfig& teacher, Rng& rng) {
    for (int l = 0; l < 3; ++l)
      for (TapLevel lev : kAllTapLevels)
        at[l][static_cast<int>(lev)] = Neck(student.dims[l], teacher.dims[l], rng);
  }

  static NeckSet identity_for(const EncoderConfig& cfg) {
    NeckSet n;
    for (int l = 0; l < 3; ++l)
      for (TapLevel lev : kAllTapLevels)
        n.at[l][static_cast<int>(lev)] = Neck::identity(cfg.dims[l]);
    return n;
  }

  Neck& neck(int stage_index0, TapLevel t) { return at[stage_index0][static_cast<int>(t)]; }
  const Neck& neck(int stage_index0, TapLevel t) const {
    return at[stage_index0][static_cast<int>(t)];
  }

  void params(ParamList& out) const {
    for (int l = 0; l < 3; ++l)
      for (TapLevel lev : kAllTapLevels)
        at[l][static_cast<int>(lev)].params("distneck.stage" + std::to_string(l + 1) + "." +
                                                tap_level_name(lev) + ".",
                                            out);
  }
};

struct DistillConfig {
  std::vector<TapLevel> levels = {TapLevel::integration, TapLevel::block, TapLevel::adapter};
  std::array<double, 3> stage_weights = {1.0, 1.0, 1.0};
  int64_t epochs = 100;
  double lr = 1e-3;
  bool finetune_decoder = false;  // optional seg-loss pass over the copied decoder
  int64_t finetune_epochs = 5;

  void validate() const {
    if (levels.empty()) throw ConfigError("distillation needs at least one enabled level");
    for (size_t i = 0; i < levels.size(); ++i)
      for (size_t j = i + 1; j < levels.size(); ++j)
        if (levels[i] == levels[j])
          throw ConfigError(std::string("distillation level '") + tap_level_name(levels[i]) +
                            "' listed twice");
    if (epochs < 1) throw ConfigError("distillation epochs must be >= 1");
  }
};

struct DskdTerm {
  int stage;  // 1-based
  TapLevel level;
  Tensor value;  // scalar, unweighted
};

struct DskdBreakdown {
  std::vector<DskdTerm> terms;
  Tensor total;  // sum of stage_weight * term
};

// Alignment loss between teacher taps and necked student taps: one
// mean-per-element squared error per enabled (stage, level), summed with the
// stage weights. Teacher taps are detached, so gradient reaches the student
// and the necks only.
inline DskdBreakdown dskd_terms(const std::array<StageTaps, 3>& teacher,
                                const std::array<StageTaps, 3>& student, const NeckSet& necks,
                                const DistillConfig& cfg) {
  cfg.validate();
  DskdBreakdown out;
  for (int l = 0; l < 3; ++l)
    for (TapLevel lev : cfg.levels) {
      const Tensor& t = pick_tap(teacher[l], lev);
      const Tensor& s = pick_tap(student[l], lev);
      Tensor necked = necks.neck(l, lev).forward(s);
      if (necked.shape() != t.shape())
        throw ShapeError("dskd stage " + std::to_string(l + 1) + " level " + tap_level_name(lev) +
                         ": teacher tap " + shape_str(t.shape()) + " vs necked student tap " +
                         shape_str(necked.shape()));
      Tensor term = mse(necked, t.detach());
      out.terms.push_back({l + 1, lev, term});
      Tensor weighted = scale(term, cfg.stage_weights[l]);
      out.total = out.total.defined() ? add(out.total, weighted) : weighted;
    }
  return out;
}

inline Tensor dskd_loss(const std::array<StageTaps, 3>& teacher,
                        const std::array<StageTaps, 3>& student, const NeckSet& necks,
                        const DistillConfig& cfg) {
  return dskd_terms(teacher, student, necks, cfg).total;
}

namespace detail {

inline void copy_values(Tensor& dst, const Tensor& src, const std::string& what) {
  if (dst.shape() != src.shape())
    throw ShapeError("copy " + what + ": shape " + shape_str(src.shape()) + " vs " +
                     shape_str(dst.shape()));
  dst.raw_data() = src.data();
}

// Copies every src entry into the same-named dst entry; all of src must land.
inline void copy_by_name(ParamList& dst, const ParamList& src) {
  std::unordered_map<std::string, Tensor*> index;
  for (auto& p : dst) index[p.name] = &p.value;
  for (const auto& s : src) {
    auto it = index.find(s.name);
    if (it == index.end()) throw ContractViolation("copy_by_name: no destination for " + s.name);
    copy_values(*it->second, s.value, s.name);
  }
}

}  // namespace detail

// The compressed model: a narrow encoder whose stage-3 output is bridged into
// the teacher's decoding stack (1x1 neck + prompt encoder + mask decoder,
// copied over and normally frozen). The bridge is the stage-3 integration
// neck, so distillation configs that disable the integration level leave the
// bridge untrained and the model is only good for loss studies.
struct StudentModel {
  EncoderConfig cfg;         // student encoder geometry
  std::array<int64_t, 3> teacher_dims;
  Encoder encoder;
  NeckSet necks;
  Tensor teacher_neck_w, teacher_neck_b;
  PromptEncoder prompt;
  MaskDecoder decoder;

  StudentModel(const EncoderConfig& student_cfg, const EncoderConfig& teacher_cfg, Rng& rng)
      : cfg((student_cfg.validate(), student_cfg)),
        teacher_dims({teacher_cfg.dims[0], teacher_cfg.dims[1], teacher_cfg.dims[2]}),
        encoder(student_cfg, rng),
        necks(student_cfg, teacher_cfg, rng),
        teacher_neck_w(Tensor::zeros({teacher_cfg.decoder_dim(), teacher_cfg.dims[2], 1, 1})),
        teacher_neck_b(Tensor::zeros({teacher_cfg.decoder_dim()})),
        prompt(teacher_cfg.decoder_dim(), rng),
        decoder(teacher_cfg.decoder_dim(), student_cfg.image_size,
                student_cfg.image_size / student_cfg.patch / 4, rng) {
    if (student_cfg.image_size != teacher_cfg.image_size ||
        student_cfg.patch != teacher_cfg.patch)
      throw ConfigError("student and teacher tap grids differ: image " +
                        std::to_string(student_cfg.image_size) + "/" +
                        std::to_string(teacher_cfg.image_size) + ", patch " +
                        std::to_string(student_cfg.patch) + "/" +
                        std::to_string(teacher_cfg.patch));
    set_decoder_trainable(false);
  }

  void set_decoder_trainable(bool on) {
    teacher_neck_w.set_requires_grad(on);
    teacher_neck_b.set_requires_grad(on);
    ParamList head;
    prompt.params(head);
    decoder.params(head);
    for (auto& p : head) p.value.set_requires_grad(on);
  }

  const Neck& bridge() const { return necks.neck(2, TapLevel::integration); }

  Tensor forward(const Tensor& img, const BoxPrompt& box) const {
    EncodeOut enc = encoder.encode(img);
    Tensor emb = conv2d(bridge().forward(enc.taps[2].integration), teacher_neck_w, teacher_neck_b,
                        1, 0);
    return decoder.forward(emb, prompt.encode_box(box, cfg.image_size));
  }

  ParamList params() const {
    ParamList out;
    encoder.params(out);
    necks.params(out);
    out.push_back({"teacher.neck.w", teacher_neck_w});
    out.push_back({"teacher.neck.b", teacher_neck_b});
    prompt.params(out);
    decoder.params(out);
    check_unique_names(out);
    return out;
  }
};

// Mean alignment loss over a dataset, no tape.
inline double dataset_dskd_loss(const SegModel& teacher, const StudentModel& sm,
                                const std::vector<MaskPair>& data, const DistillConfig& cfg) {
  NoGradGuard ng;
  double sum = 0.0;
  for (const MaskPair& p : data) {
    auto t = teacher.encoder.encode(p.image);
    auto s = sm.encoder.encode(p.image);
    sum += dskd_loss(t.taps, s.taps, sm.necks, cfg).item();
  }
  return sum / static_cast<double>(data.size());
}

struct DistillRun {
  StudentModel model;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  bool loss_decreased = false;
  std::string trace_csv;
};

// Trains the student encoder plus the enabled necks to imitate the frozen
// teacher's taps on every training image, then attaches the teacher's
// decoding stack for evaluation.
inline DistillRun distill_run(const SegModel& teacher, const EncoderConfig& student_cfg,
                              const std::vector<MaskPair>& data, const DistillConfig& cfg,
                              uint64_t seed) {
  cfg.validate();
  if (data.empty()) throw DataError("distill: empty training set");

  Rng init_rng(seed, "distill-init");
  DistillRun run{StudentModel(student_cfg, teacher.cfg, init_rng)};
  StudentModel& sm = run.model;

  detail::copy_values(sm.teacher_neck_w, teacher.encoder.neck_w, "teacher neck weight");
  detail::copy_values(sm.teacher_neck_b, teacher.encoder.neck_b, "teacher neck bias");
  ParamList head_dst, head_src;
  sm.prompt.params(head_dst);
  sm.decoder.params(head_dst);
  teacher.prompt.params(head_src);
  teacher.decoder.params(head_src);
  detail::copy_by_name(head_dst, head_src);
  sm.set_decoder_trainable(false);

  run.initial_loss = dataset_dskd_loss(teacher, sm, data, cfg);

  // Only parameters the loss actually reaches go to the optimizer; which ones
  // those are depends on the enabled levels, so probe rather than hard-code.
  std::optional<Adam> opt;
  size_t n_terms = cfg.levels.size() * 3;
  std::ostringstream trace;
  trace << "epoch";
  for (int l = 1; l <= 3; ++l)
    for (TapLevel lev : cfg.levels) trace << ",stage" << l << "_" << tap_level_name(lev);
  trace << ",total\n";

  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng(seed, "distill-order", static_cast<uint64_t>(epoch));
    order_rng.shuffle(order);
    std::vector<double> term_sums(n_terms, 0.0);
    double total_sum = 0.0;
    for (size_t idx : order) {
      const MaskPair& p = data[idx];
      std::array<StageTaps, 3> teacher_taps;
      {
        NoGradGuard ng;
        teacher_taps = teacher.encoder.encode(p.image).taps;
      }
      auto student_taps = sm.encoder.encode(p.image).taps;
      DskdBreakdown bd = dskd_terms(teacher_taps, student_taps, sm.necks, cfg);
      for (size_t t = 0; t < n_terms; ++t) term_sums[t] += bd.terms[t].value.item();
      total_sum += bd.total.item();
      bd.total.backward();
      if (!opt) {
        ParamList reached;
        ParamList candidates;
        sm.encoder.params(candidates);
        sm.necks.params(candidates);
        for (auto& c : candidates)
          if (c.value.requires_grad() && c.value.has_grad()) reached.push_back(c);
        opt.emplace(std::move(reached), AdamConfig{cfg.lr});
      }
      opt->step();
    }
    trace << (epoch + 1);
    for (size_t t = 0; t < n_terms; ++t)
      trace << "," << term_sums[t] / static_cast<double>(data.size());
    trace << "," << total_sum / static_cast<double>(data.size()) << "\n";
  }

  run.final_loss = dataset_dskd_loss(teacher, sm, data, cfg);
  run.loss_decreased = run.final_loss <= run.initial_loss;
  run.trace_csv = trace.str();

  if (cfg.finetune_decoder && cfg.finetune_epochs > 0) {
    sm.set_decoder_trainable(true);
    ParamList head;
    sm.prompt.params(head);
    sm.decoder.params(head);
    head.push_back({"teacher.neck.w", sm.teacher_neck_w});
    head.push_back({"teacher.neck.b", sm.teacher_neck_b});
    Adam fopt(head, AdamConfig{cfg.lr});
    for (int64_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
      Rng order_rng(seed, "distill-ft-order", static_cast<uint64_t>(epoch));
      order_rng.shuffle(order);
      for (size_t idx : order) {
        const MaskPair& p = data[idx];
        Tensor logits = sm.forward(p.image, p.box);
        seg_loss(logits, p.mask).backward();
        fopt.step();
      }
    }
  }
  return run;
}

}  // namespace sonoseg
