#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sonoseg/checkpoint.hpp"
#include "sonoseg/config.hpp"
#include "sonoseg/data.hpp"
#include "sonoseg/distill.hpp"
#include "sonoseg/gradcheck_suite.hpp"
#include "sonoseg/train.hpp"

namespace fs = std::filesystem;
using namespace sonoseg;

// Exit codes: 0 ok, 1 usage/config, 2 data, 3 failed self-check or internal
// contract. Everything below throws; main() maps.

namespace {

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<MaskPair> pick(const std::vector<MaskPair>& all, const std::vector<std::string>& ids) {
  std::vector<MaskPair> out;
  for (const auto& p : all)
    for (const auto& id : ids)
      if (p.id == id) out.push_back(p);
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

std::vector<MaskPair> load_or_generate(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return load_dir(cfg.data_dir, cfg.image_size);
  return gen_synthetic(cfg.n_images, cfg.seed, cfg.image_size, cfg.box_jitter);
}

struct SplitData {
  std::vector<MaskPair> train, val, test;
};

SplitData split_data(const std::vector<MaskPair>& all, uint64_t seed) {
  std::vector<std::string> ids;
  for (const auto& p : all) ids.push_back(p.id);
  Split sp = split_ids(ids, SplitSpec{seed});
  return {pick(all, sp.train), pick(all, sp.val), pick(all, sp.test)};
}

SegModel teacher_from_checkpoint(const RunConfig& cfg, const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "teacher")
    throw ConfigError("checkpoint " + path + " holds a '" + ck.kind + "' model, need 'teacher'");
  Rng init(cfg.seed, "init");
  SegModel model(cfg.teacher_encoder(), init);
  ParamList ps = model.params();
  load_into(ps, ck);
  return model;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(int64_t n, uint64_t seed, int64_t size, int64_t jitter, const std::string& out) {
  std::vector<MaskPair> pairs = gen_synthetic(n, seed, size, jitter);
  if (n >= 10) {
    std::vector<std::string> ids;
    for (const auto& p : pairs) ids.push_back(p.id);
    Split sp = split_ids(ids, SplitSpec{seed});
    save_dataset(out, pairs, &sp);
    std::cout << "wrote " << n << " pairs to " << out << " (train " << sp.train.size() << ", val "
              << sp.val.size() << ", test " << sp.test.size() << ")\n";
  } else {
    save_dataset(out, pairs);
    std::cout << "wrote " << n << " pairs to " << out << " (too few for a split)\n";
  }
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  cfg.validate();
  SplitData data = split_data(load_or_generate(cfg), cfg.seed);
  std::cout << "data: " << data.train.size() << " train / " << data.val.size() << " val / "
            << data.test.size() << " test\n";

  Rng init(cfg.seed, "init");
  SegModel model(cfg.teacher_encoder(), init);

  TrainOptions opt;
  opt.epochs = cfg.epochs;
  opt.batch_size = cfg.batch_size;
  opt.lr0 = cfg.lr;
  opt.lr_decay = cfg.lr_decay;
  opt.loss = cfg.loss_config();
  opt.checkpoint_path = (fs::path(cfg.out_dir) / "teacher.ckpt").string();
  fs::create_directories(cfg.out_dir);

  TrainResult res = train_peft(model, data.train, data.val, opt, cfg.seed);
  write_file(fs::path(cfg.out_dir) / "train_metrics.csv", res.metrics_csv);

  std::cout << "final train dice " << res.final_train_dice << ", best val dice "
            << res.best_val_dice << " (epoch " << res.best_epoch << ")\n";
  std::cout << "checkpoint: " << opt.checkpoint_path << "\n";
  std::cout << "freeze audit: " << (res.freeze_audit_ok ? "ok" : "VIOLATED") << "\n";
  if (!res.freeze_audit_ok) {
    for (const std::string& v : res.freeze_violations) std::cerr << "  moved: " << v << "\n";
    throw CheckFailure("frozen backbone parameters moved during training");
  }
  return 0;
}

int cmd_distill(const RunConfig& cfg, const std::string& teacher_path) {
  cfg.validate();
  SegModel teacher = teacher_from_checkpoint(cfg, teacher_path);
  SplitData data = split_data(load_or_generate(cfg), cfg.seed);

  DistillRun run =
      distill_run(teacher, cfg.student_encoder(), data.train, cfg.distill_config(), cfg.seed);

  fs::create_directories(cfg.out_dir);
  std::string student_path = (fs::path(cfg.out_dir) / "student.ckpt").string();
  ParamList sp = run.model.params();
  save_checkpoint(student_path, "student", sp);
  write_file(fs::path(cfg.out_dir) / "distill_trace.csv", run.trace_csv);

  std::cout << "distill loss: initial " << run.initial_loss << ", final " << run.final_loss
            << " (ratio " << run.final_loss / run.initial_loss << ")\n";
  double tval = evaluate(teacher, data.val).mean_dice;
  double sval = evaluate(run.model, data.val).mean_dice;
  std::cout << "val dice: teacher " << tval << ", student " << sval << " (gap " << tval - sval
            << ")\n";
  std::cout << "checkpoint: " << student_path << "\n";
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt_path, const std::string& data_dir,
             const std::string& split) {
  std::vector<MaskPair> all = load_dir(data_dir, cfg.image_size);
  std::vector<MaskPair> subset;
  if (split == "all") {
    subset = all;
  } else {
    SplitData data = split_data(all, cfg.seed);
    subset = split == "train" ? data.train : split == "val" ? data.val : data.test;
  }
  if (subset.empty()) throw DataError("eval: split '" + split + "' is empty");

  Checkpoint ck = load_checkpoint(ckpt_path);
  EvalReport rep;
  if (ck.kind == "teacher") {
    Rng init(cfg.seed, "init");
    SegModel model(cfg.teacher_encoder(), init);
    ParamList ps = model.params();
    load_into(ps, ck);
    rep = evaluate(model, subset);
  } else if (ck.kind == "student") {
    Rng init(cfg.seed, "init");
    StudentModel model(cfg.student_encoder(), cfg.teacher_encoder(), init);
    ParamList ps = model.params();
    load_into(ps, ck);
    rep = evaluate(model, subset);
  } else {
    throw ConfigError("checkpoint kind '" + ck.kind + "' is not evaluable");
  }

  fs::create_directories(cfg.out_dir);
  write_file(fs::path(cfg.out_dir) / ("eval_" + split + ".csv"), rep.csv());
  write_file(fs::path(cfg.out_dir) / ("eval_" + split + ".json"), rep.json().dump(2) + "\n");
  std::cout << rep.csv();
  std::cout << "mean dice " << rep.mean_dice << ", miou " << rep.miou << ", mean hd "
            << rep.mean_hd << " over " << rep.rows.size() << " images\n";
  return 0;
}

int cmd_gradcheck(int64_t nseeds) {
  SuiteReport rep = run_gradcheck_suite(nseeds, std::cout);
  std::cout << "worst " << rep.worst << " (" << rep.worst_name << ")\n";
  if (!rep.ok) throw CheckFailure("finite-difference suite failed");
  std::cout << "gradcheck ok\n";
  return 0;
}

int cmd_params(const RunConfig& cfg) {
  cfg.validate();
  Rng r1(cfg.seed, "init");
  SegModel teacher(cfg.teacher_encoder(), r1);
  ParamList tp = teacher.params();
  apply_peft_freeze(tp);
  ParamCount peft = count_trainable(tp);

  Rng r2(cfg.seed, "init");
  StudentModel student(cfg.student_encoder(), cfg.teacher_encoder(), r2);
  ParamList sp = student.params();
  ParamCount dist = count_trainable(sp);

  ParamList tenc, senc;
  teacher.encoder.params(tenc);
  student.encoder.params(senc);
  int64_t tn = 0, sn = 0;
  for (const auto& p : tenc) tn += p.value.numel();
  for (const auto& p : senc) sn += p.value.numel();

  std::ostringstream table;
  table << "phase,trainable,total,ratio\n";
  table << "peft," << peft.trainable << "," << peft.total << "," << peft.ratio << "\n";
  table << "distill," << dist.trainable << "," << dist.total << "," << dist.ratio << "\n";
  table << "encoder_compression," << sn << "," << tn << "," << double(sn) / double(tn) << "\n";
  std::cout << table.str();
  return 0;
}

// Paired-seed studies. Every arm sees the same data and the same named init
// stream; only the swept field changes.
int cmd_ablate(const RunConfig& cfg, const std::string& study) {
  cfg.validate();
  SplitData data = split_data(load_or_generate(cfg), cfg.seed);
  std::ostringstream table;

  if (study == "edge-directions") {
    table << "arm,directions,final_train_dice,best_val_dice\n";
    std::vector<std::pair<std::string, std::vector<std::string>>> arms = {
        {"none", {}},
        {"axis2", {"horizontal", "vertical"}},
        {"all4", {"horizontal", "vertical", "right_diagonal", "left_diagonal"}},
    };
    for (const auto& [name, dirs] : arms) {
      RunConfig arm = cfg;
      arm.edge_directions = dirs;
      Rng init(arm.seed, "init");
      SegModel model(arm.teacher_encoder(), init);
      TrainOptions opt;
      opt.epochs = arm.epochs;
      opt.batch_size = arm.batch_size;
      opt.lr0 = arm.lr;
      opt.lr_decay = arm.lr_decay;
      opt.loss = arm.loss_config();
      TrainResult res = train_peft(model, data.train, data.val, opt, arm.seed);
      table << name << "," << dirs.size() << "," << res.final_train_dice << ","
            << res.best_val_dice << "\n";
      std::cout << "arm " << name << ": train " << res.final_train_dice << " val "
                << res.best_val_dice << "\n";
    }
  } else if (study == "distill-levels") {
    Rng init(cfg.seed, "init");
    SegModel teacher(cfg.teacher_encoder(), init);
    TrainOptions opt;
    opt.epochs = cfg.epochs;
    opt.batch_size = cfg.batch_size;
    opt.lr0 = cfg.lr;
    opt.lr_decay = cfg.lr_decay;
    opt.loss = cfg.loss_config();
    train_peft(teacher, data.train, data.val, opt, cfg.seed);
    double tval = evaluate(teacher, data.val).mean_dice;
    std::cout << "teacher val dice " << tval << "\n";

    table << "arm,levels,final_loss,student_val_dice,teacher_val_dice\n";
    std::vector<std::pair<std::string, std::vector<std::string>>> arms = {
        {"integration", {"integration"}},
        {"integration+block", {"integration", "block"}},
        {"integration+adapter", {"integration", "adapter"}},
        {"all3", {"integration", "block", "adapter"}},
    };
    for (const auto& [name, levels] : arms) {
      RunConfig arm = cfg;
      arm.distill_levels = levels;
      DistillRun run =
          distill_run(teacher, arm.student_encoder(), data.train, arm.distill_config(), arm.seed);
      double sval = evaluate(run.model, data.val).mean_dice;
      table << name << "," << levels.size() << "," << run.final_loss << "," << sval << "," << tval
            << "\n";
      std::cout << "arm " << name << ": final loss " << run.final_loss << " student val " << sval
                << "\n";
    }
  } else if (study == "adapter-dim") {
    table << "arm,adapter_dim,trainable,final_train_dice,best_val_dice\n";
    std::vector<int64_t> arms;
    for (int64_t div : {8, 4, 2})
      if (cfg.dims[0] / div >= 1) arms.push_back(cfg.dims[0] / div);
    for (int64_t dim : arms) {
      RunConfig arm = cfg;
      arm.adapter_dim = dim;
      arm.adapter_edge_dim = dim;
      Rng init(arm.seed, "init");
      SegModel model(arm.teacher_encoder(), init);
      ParamList ps = model.params();
      apply_peft_freeze(ps);
      ParamCount pc = count_trainable(ps);
      TrainOptions opt;
      opt.epochs = arm.epochs;
      opt.batch_size = arm.batch_size;
      opt.lr0 = arm.lr;
      opt.lr_decay = arm.lr_decay;
      opt.loss = arm.loss_config();
      TrainResult res = train_peft(model, data.train, data.val, opt, arm.seed);
      table << dim << "," << dim << "," << pc.trainable << "," << res.final_train_dice << ","
            << res.best_val_dice << "\n";
      std::cout << "arm dim=" << dim << ": trainable " << pc.trainable << " train "
                << res.final_train_dice << " val " << res.best_val_dice << "\n";
    }
  } else {
    throw ConfigError("unknown study '" + study + "'");
  }

  fs::create_directories(cfg.out_dir);
  std::string name = "ablate_" + study + ".csv";
  write_file(fs::path(cfg.out_dir) / name, table.str());
  std::cout << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sonoseg: frozen-backbone segmentation with adapter tuning and distillation"};
  app.require_subcommand(1);

  // shared config plumbing: --config loads JSON, individual flags override
  std::string config_path;
  RunConfig cfg;
  uint64_t seed = 0;
  int64_t epochs = 0, batch = 0, n_images = 0, distill_epochs = 0;
  double lr = 0.0, distill_lr = 0.0;
  std::string data_dir, out_dir;

  auto add_cfg_flags = [&](CLI::App* sub, bool with_train, bool with_distill) {
    sub->add_option("--config", config_path, "JSON run config");
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--data", data_dir, "dataset directory (default: synthesize)");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--n-images", n_images, "synthetic dataset size");
    if (with_train) {
      sub->add_option("--epochs", epochs, "training epochs");
      sub->add_option("--batch", batch, "batch size");
      sub->add_option("--lr", lr, "initial learning rate");
    }
    if (with_distill) {
      sub->add_option("--distill-epochs", distill_epochs, "distillation epochs");
      sub->add_option("--distill-lr", distill_lr, "distillation learning rate");
    }
  };
  auto counted = [](CLI::App* sub, const std::string& name) {
    CLI::Option* o = sub->get_option_no_throw(name);
    return o != nullptr && o->count() > 0;
  };
  auto build_cfg = [&](CLI::App* sub) {
    cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (counted(sub, "--seed")) cfg.seed = seed;
    if (counted(sub, "--data")) cfg.data_dir = data_dir;
    if (counted(sub, "--out")) cfg.out_dir = out_dir;
    if (counted(sub, "--n-images")) cfg.n_images = n_images;
    if (counted(sub, "--epochs")) cfg.epochs = epochs;
    if (counted(sub, "--batch")) cfg.batch_size = batch;
    if (counted(sub, "--lr")) cfg.lr = lr;
    if (counted(sub, "--distill-epochs")) cfg.distill_epochs = distill_epochs;
    if (counted(sub, "--distill-lr")) cfg.distill_lr = distill_lr;
    return cfg;
  };

  // gen-data
  int64_t gen_n = 10, gen_size = 64, gen_jitter = 4;
  uint64_t gen_seed = 7;
  std::string gen_out = "data";
  CLI::App* gen = app.add_subcommand("gen-data", "synthesize a PNG dataset with masks");
  gen->add_option("--n", gen_n, "number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--size", gen_size, "image side length");
  gen->add_option("--jitter", gen_jitter, "box prompt outward jitter in pixels");
  gen->add_option("--out", gen_out, "output directory")->required();

  CLI::App* train = app.add_subcommand("train", "phase 1: adapter + decoder tuning");
  add_cfg_flags(train, true, false);

  std::string teacher_path;
  CLI::App* distill = app.add_subcommand("distill", "phase 2: compress into the student");
  distill->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  add_cfg_flags(distill, false, true);

  std::string eval_ckpt, eval_data, eval_split = "test";
  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--split", eval_split, "train|val|test|all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  eval->add_option("--config", config_path, "JSON run config");
  eval->add_option("--seed", seed, "master seed");
  eval->add_option("--out", out_dir, "output directory");

  int64_t gc_seeds = 10;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference self-check");
  gradcheck->add_option("--seeds", gc_seeds, "random repetitions per op");

  CLI::App* params = app.add_subcommand("params", "trainable-parameter accounting per phase");
  params->add_option("--config", config_path, "JSON run config");

  std::string study;
  CLI::App* ablate = app.add_subcommand("ablate", "paired-seed comparison studies");
  ablate->add_option("--study", study, "edge-directions|distill-levels|adapter-dim")
      ->required()
      ->check(CLI::IsMember({"edge-directions", "distill-levels", "adapter-dim"}));
  add_cfg_flags(ablate, true, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_n, gen_seed, gen_size, gen_jitter, gen_out);
    if (train->parsed()) return cmd_train(build_cfg(train));
    if (distill->parsed()) return cmd_distill(build_cfg(distill), teacher_path);
    if (eval->parsed()) return cmd_eval(build_cfg(eval), eval_ckpt, eval_data, eval_split);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_seeds);
    if (params->parsed()) return cmd_params(build_cfg(params));
    if (ablate->parsed()) return cmd_ablate(build_cfg(ablate), study);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
