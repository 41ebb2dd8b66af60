#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "encdec/adaptation.hpp"
#include "encdec/checkpoint.hpp"
#include "encdec/errors.hpp"
#include "encdec/gradcheck.hpp"
#include "encdec/run_config.hpp"
#include "encdec/training.hpp"
#include "encdec/ul2.hpp"
#include "encdec/vision.hpp"

namespace fs = std::filesystem;
using namespace encdec;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitFormat = 5;

struct ConfigFlags {
  std::string path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* app) {
    app->add_option("-c,--config", path, "key=value run config file");
    app->add_option("--set", sets, "override one config entry, KEY=VALUE (repeatable, wins over the file)");
    app->add_option("--seed", seed, "model initialisation seed (same as --set seed=N)");
  }

  RunConfig resolve() const {
    KeyValues overrides;
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError(fmt::format("--set expects KEY=VALUE, got '{}'", s));
      overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed) overrides.emplace_back("seed", std::to_string(*seed));
    RunConfig rc = RunConfig::load(path, overrides);
    rc.validate();
    for (const auto& [k, v] : rc.to_pairs()) fmt::print("config\t{}={}\n", k, v);
    return rc;
  }
};

void result(const std::string& command, const std::vector<std::pair<std::string, std::string>>& fields) {
  std::string line = "RESULT\t" + command;
  for (const auto& [k, v] : fields) line += fmt::format("\t{}={}", k, v);
  fmt::print("{}\n", line);
}

std::string num(double v) { return format_double(v); }

// A shard file, or every *.ul2s file in a directory in name order.
std::vector<ExamplePair> read_examples(const fs::path& path) {
  if (!fs::exists(path)) throw DataError(fmt::format("no such data path {}", path.string()));
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.path().extension() == ".ul2s") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError(fmt::format("no .ul2s shards in {}", path.string()));
  } else {
    files.push_back(path);
  }
  std::vector<ExamplePair> out;
  for (const fs::path& f : files) {
    auto pairs = read_shard(f);
    out.insert(out.end(), std::make_move_iterator(pairs.begin()), std::make_move_iterator(pairs.end()));
  }
  return out;
}

std::vector<Tensor> load_images(const std::string& path, const ModelConfig& cfg) {
  if (path.empty()) return {};
  VisionFixture fx = VisionFixture::load(path);
  if (fx.d_vision != cfg.vision.d_vision) {
    throw ConfigError(fmt::format("vision fixture has d_vision {} but model.d_vision is {}", fx.d_vision,
                                  cfg.vision.d_vision));
  }
  return std::move(fx.images);
}

std::string tag_name(std::uint8_t tag, const std::vector<DenoiserSpec>& bank) {
  if (tag == kVisionPrefixTag) return "vision_prefix";
  return tag < bank.size() ? bank[tag].name() : fmt::format("tag{}", tag);
}

int cmd_preprocess(const ConfigFlags& flags, const std::string& corpus, const std::string& out_dir) {
  const RunConfig rc = flags.resolve();
  std::ifstream in(corpus);
  if (!in) throw DataError(fmt::format("cannot read corpus {}", corpus));
  const TokenLayout layout = rc.model.tokens();
  WordVocabulary vocab(layout.ordinary());
  std::vector<MixedSequence> docs;
  std::string line;
  while (std::getline(in, line)) {
    MixedSequence doc = vocab.encode_line(line);
    if (!doc.items.empty()) docs.push_back(std::move(doc));
  }
  if (docs.empty()) throw DataError(fmt::format("no documents in {}", corpus));

  const std::vector<ExamplePair> pairs = preprocess_documents(docs, layout, rc.ul2);
  if (pairs.empty()) throw DataError(fmt::format("no examples produced from {}", corpus));
  fs::create_directories(out_dir);
  for (const auto& entry : fs::directory_iterator(out_dir))
    if (entry.path().extension() == ".ul2s") fs::remove(entry.path());
  std::size_t shards = 0;
  for (std::size_t begin = 0; begin < pairs.size(); begin += rc.shard_size, ++shards) {
    const std::size_t end = std::min(pairs.size(), begin + rc.shard_size);
    write_shard(fs::path(out_dir) / fmt::format("shard_{:05}.ul2s", shards),
                std::span(pairs).subspan(begin, end - begin));
  }

  CorruptionStats stats(layout);
  for (const ExamplePair& p : pairs) stats.add(p);
  std::size_t text_pairs = 0;
  for (const auto& [tag, s] : stats.by_tag())
    if (tag != kVisionPrefixTag) text_pairs += s.examples;
  for (const auto& [tag, s] : stats.by_tag()) {
    const double share = tag == kVisionPrefixTag || text_pairs == 0
                             ? 0.0
                             : static_cast<double>(s.examples) / static_cast<double>(text_pairs);
    fmt::print("denoiser\t{}\t{}\texamples={}\tshare={:.4f}\tcorruption_rate={:.4f}\tmean_span={:.3f}\n", tag,
               tag_name(tag, rc.ul2.bank), s.examples, share, s.corruption_rate(), s.mean_span_length());
  }
  result("preprocess", {{"documents", std::to_string(docs.size())},
                        {"vocabulary", std::to_string(vocab.size())},
                        {"pairs", std::to_string(pairs.size())},
                        {"shards", std::to_string(shards)}});
  return 0;
}

int cmd_init(const ConfigFlags& flags, const std::string& out) {
  const RunConfig rc = flags.resolve();
  const Checkpoint c = Checkpoint::from_model(build_model(rc.model, rc.seed), 0, rc.train.checkpoint_dtype);
  save_checkpoint(c, out);
  result("init", {{"parameters", std::to_string(count_params(rc.model).total())}, {"path", out}});
  return 0;
}

int cmd_synth_vision(const ConfigFlags& flags, std::size_t count, const std::string& out) {
  const RunConfig rc = flags.resolve();
  if (rc.model.vision.d_vision == 0) throw ConfigError("synth-vision needs model.d_vision > 0");
  VisionFixture::synthetic(rc.model.vision.d_vision, count, rc.seed).save(out);
  result("synth-vision", {{"images", std::to_string(count)}, {"d_vision", std::to_string(rc.model.vision.d_vision)}});
  return 0;
}

int cmd_adapt(const ConfigFlags& flags, const std::string& source, const std::string& out) {
  const RunConfig rc = flags.resolve();
  const Checkpoint adapted = adapt_from_decoder_only(load_checkpoint(source), rc.model, rc.seed);
  save_checkpoint(adapted, out);
  result("adapt", {{"tensors", std::to_string(adapted.tensors.size())},
                   {"parameters", std::to_string(count_params(adapted.config).total())},
                   {"path", out}});
  return 0;
}

int cmd_average(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<Checkpoint> ckpts;
  for (const std::string& p : inputs) ckpts.push_back(load_checkpoint(p));
  const Checkpoint avg = average_checkpoints(ckpts);
  save_checkpoint(avg, out);
  result("average", {{"inputs", std::to_string(ckpts.size())}, {"step", std::to_string(avg.step)}, {"path", out}});
  return 0;
}

Model initial_model(const RunConfig& rc, const std::string& init) {
  if (init.empty()) return build_model(rc.model, rc.seed);
  Checkpoint c = load_checkpoint(init);
  if (c.config != rc.model) {
    const KeyValues want = rc.model.to_pairs();
    const KeyValues have = c.config.to_pairs();
    for (std::size_t i = 0; i < want.size(); ++i) {
      if (want[i] != have[i]) {
        throw ConfigError(fmt::format("checkpoint {} has model.{}={} but the run config says {}", init, have[i].first,
                                      have[i].second, want[i].second));
      }
    }
  }
  return c.to_model();
}

int cmd_train(const ConfigFlags& flags, const std::string& data, const std::string& vision, const std::string& init,
              const std::string& out_dir) {
  RunConfig rc = flags.resolve();
  if (!out_dir.empty()) rc.train.out_dir = out_dir;
  const std::vector<ExamplePair> examples = read_examples(data);
  const std::vector<Tensor> images = load_images(vision, rc.model);
  Model model = initial_model(rc, init);
  if (!rc.train.out_dir.empty()) {
    fs::create_directories(rc.train.out_dir);
    std::ofstream(rc.train.out_dir / "run.cfg") << format_key_values(rc.to_pairs());
  }
  std::cout.flush();
  const TrainReport report = train(model, examples, rc.train, images, &std::cout);
  const StepMetrics& last = report.metrics.back();
  result("train", {{"steps", std::to_string(last.step)},
                   {"final_loss", num(last.loss)},
                   {"checkpoints", std::to_string(report.checkpoints.size())},
                   {"averaged", report.averaged.string()}});
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& vision) {
  const Checkpoint c = load_checkpoint(checkpoint);
  const Model model = c.to_model();
  const std::vector<ExamplePair> examples = read_examples(data);
  const std::vector<Tensor> images = load_images(vision, model.config);
  const auto by_tag = eval_denoising(model, examples, images);
  const std::vector<DenoiserSpec> bank = standard_bank();
  for (const auto& [tag, s] : by_tag) {
    fmt::print("eval\t{}\t{}\ttokens={}\taccuracy={:.6f}\tperplexity={:.6f}\n", tag, tag_name(tag, bank), s.tokens,
               s.accuracy(), s.perplexity());
  }
  const EvalStats all = merge_stats(by_tag);
  result("eval", {{"examples", std::to_string(examples.size())},
                  {"tokens", std::to_string(all.tokens)},
                  {"accuracy", fmt::format("{:.6f}", all.accuracy())},
                  {"perplexity", fmt::format("{:.6f}", all.perplexity())}});
  return 0;
}

int cmd_param_count(const ConfigFlags& flags) {
  const RunConfig rc = flags.resolve();
  const ParamBreakdown b = count_params(rc.model);
  const auto millions = [](std::size_t n) { return fmt::format("{:.1f}M", static_cast<double>(n) / 1e6); };
  fmt::print("params\tembedding\t{}\t{}\n", b.embedding, millions(b.embedding));
  fmt::print("params\tencoder\t{}\t{}\n", b.encoder, millions(b.encoder));
  fmt::print("params\tdecoder\t{}\t{}\n", b.decoder, millions(b.decoder));
  fmt::print("params\tvision_projection\t{}\t{}\n", b.vision_projection, millions(b.vision_projection));
  fmt::print("params\ttotal\t{}\t{}\n", b.total(), millions(b.total()));
  result("param-count", {{"total", std::to_string(b.total())},
                         {"embedding", std::to_string(b.embedding)},
                         {"non_embedding", std::to_string(b.non_embedding())},
                         {"embedding_m", millions(b.embedding)},
                         {"total_m", millions(b.total())}});
  return 0;
}

int cmd_grad_check(const ConfigFlags& flags, std::size_t examples, std::size_t length, std::size_t max_entries,
                   double step, double tolerance) {
  const RunConfig rc = flags.resolve();
  const ModelConfig& cfg = rc.model;
  const Model model = build_model(cfg, rc.seed);
  const std::vector<ExamplePair> data = make_copy_examples(cfg.tokens(), length, examples, rc.seed + 1);
  ParamMap trainable, frozen;
  for (const auto& [name, t] : model.params) (is_frozen(cfg, name) ? frozen : trainable).emplace(name, t);
  std::vector<Tensor> images;
  if (cfg.vision.d_vision > 0) images = VisionFixture::synthetic(cfg.vision.d_vision, 1, rc.seed).images;

  const TapedLoss loss = [&](Tape& tape, const std::map<std::string, Var>& leaves) {
    ParamVars params = leaves;
    for (const auto& [name, t] : frozen) params.emplace(name, tape.constant(t));
    std::optional<Var> sum;
    std::size_t tokens = 0;
    for (const ExamplePair& ex : data) {
      const Seq2SeqOutput out = seq2seq_forward(cfg, params, ex.input, ex.target, images);
      sum = sum ? ad::add(*sum, out.loss_sum) : out.loss_sum;
      tokens += out.tokens;
    }
    return ad::scale(*sum, 1.0 / static_cast<double>(tokens));
  };
  GradCheckOptions opts;
  opts.step = step;
  opts.tolerance = tolerance;
  opts.max_entries_per_tensor = max_entries;
  opts.seed = rc.seed;
  const GradCheckReport report = finite_diff_check(loss, trainable, opts);
  std::size_t checked = 0;
  for (const TensorGradReport& t : report.tensors) {
    fmt::print("tensor\t{}\tchecked={}\tmax_rel_err={:.3e}\tmax_abs_err={:.3e}\t{}\n", t.name, t.checked,
               t.max_rel_error, t.max_abs_error, t.pass ? "ok" : "FAIL");
    checked += t.checked;
  }
  result("grad-check", {{"entries", std::to_string(checked)},
                        {"max_rel_err", fmt::format("{:.3e}", report.max_rel_error)},
                        {"tolerance", num(tolerance)},
                        {"pass", report.pass ? "1" : "0"}});
  if (!report.pass) {
    throw NumericError(fmt::format("gradient check failed: max relative error {:.3e} > {}", report.max_rel_error,
                                   num(tolerance)));
  }
  return 0;
}

int cmd_describe(const std::string& path) {
  const Checkpoint c = load_checkpoint(path);
  fmt::print("{}", describe(c));
  result("describe", {{"tensors", std::to_string(c.tensors.size())},
                      {"parameters", std::to_string(count_params(c.config).total())}});
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"Encoder-decoder toolkit: UL2 preprocessing, adaptation, training and checks"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  // Each subcommand gets its own flags object; only the chosen one is used.
  std::vector<std::unique_ptr<ConfigFlags>> flag_sets;
  const auto with_config = [&](CLI::App* sub) {
    flag_sets.push_back(std::make_unique<ConfigFlags>());
    flag_sets.back()->add_to(sub);
    return flag_sets.back().get();
  };
  int status = 0;

  std::string corpus, out, source, data, vision, init, out_dir, checkpoint;
  std::vector<std::string> inputs;
  std::size_t count = 1, examples = 1, length = 6, max_entries = 0;
  double fd_step = 1e-5, tolerance = 1e-4;

  auto* pre = app.add_subcommand("preprocess", "corpus (one document per line) -> UL2 shards + statistics");
  ConfigFlags* pre_cfg = with_config(pre);
  pre->add_option("--corpus", corpus, "text corpus; '<img:K>' words reference fixture image K")->required();
  pre->add_option("--out", out, "output directory for shard_NNNNN.ul2s files")->required();
  pre->callback([&] { status = cmd_preprocess(*pre_cfg, corpus, out); });

  auto* ini = app.add_subcommand("init", "write a freshly initialised checkpoint for the configured model");
  ConfigFlags* ini_cfg = with_config(ini);
  ini->add_option("--out", out, "output checkpoint (.edck)")->required();
  ini->callback([&] { status = cmd_init(*ini_cfg, out); });

  auto* vis = app.add_subcommand("synth-vision", "write a synthetic vision embedding fixture");
  ConfigFlags* vis_cfg = with_config(vis);
  vis->add_option("--count", count, "number of images")->capture_default_str();
  vis->add_option("--out", out, "output fixture file")->required();
  vis->callback([&] { status = cmd_synth_vision(*vis_cfg, count, out); });

  auto* adp = app.add_subcommand("adapt", "initialise an encoder-decoder checkpoint from a decoder-only one");
  ConfigFlags* adp_cfg = with_config(adp);
  adp->add_option("--source", source, "decoder-only source checkpoint")->required();
  adp->add_option("--out", out, "output checkpoint")->required();
  adp->callback([&] { status = cmd_adapt(*adp_cfg, source, out); });

  auto* avg = app.add_subcommand("average", "element-wise mean of checkpoints");
  avg->add_option("checkpoints", inputs, "input checkpoints")->required();
  avg->add_option("--out", out, "output checkpoint")->required();
  avg->callback([&] { status = cmd_average(inputs, out); });

  auto* trn = app.add_subcommand("train", "train on UL2 shards; writes the metrics log to stdout");
  ConfigFlags* trn_cfg = with_config(trn);
  trn->add_option("--data", data, "shard file or directory of shards")->required();
  trn->add_option("--vision", vision, "vision embedding fixture for image items");
  trn->add_option("--init", init, "start from this checkpoint instead of a fresh model");
  trn->add_option("--out-dir", out_dir, "checkpoint directory (overrides train.out_dir)");
  trn->callback([&] { status = cmd_train(*trn_cfg, data, vision, init, out_dir); });

  auto* evl = app.add_subcommand("eval", "teacher-forced accuracy and perplexity per denoiser");
  evl->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  evl->add_option("--data", data, "shard file or directory of shards")->required();
  evl->add_option("--vision", vision, "vision embedding fixture for image items");
  evl->callback([&] { status = cmd_eval(checkpoint, data, vision); });

  auto* pc = app.add_subcommand("param-count", "closed-form parameter counts for the configured model");
  ConfigFlags* pc_cfg = with_config(pc);
  pc->callback([&] { status = cmd_param_count(*pc_cfg); });

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of end-to-end loss gradients");
  ConfigFlags* gc_cfg = with_config(gc);
  gc->add_option("--examples", examples, "copy-task examples in the loss")->capture_default_str();
  gc->add_option("--length", length, "tokens per example")->capture_default_str();
  gc->add_option("--max-entries", max_entries, "entries checked per tensor, 0 = all")->capture_default_str();
  gc->add_option("--step", fd_step, "finite-difference step h")->capture_default_str();
  gc->add_option("--tolerance", tolerance, "maximum relative error")->capture_default_str();
  gc->callback([&] { status = cmd_grad_check(*gc_cfg, examples, length, max_entries, fd_step, tolerance); });

  auto* dsc = app.add_subcommand("describe", "print checkpoint metadata and tensor manifest");
  dsc->add_option("checkpoint", checkpoint, "checkpoint file")->required();
  dsc->callback([&] { status = cmd_describe(checkpoint); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const FormatError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitFormat;
  } catch (const ConfigError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitConfig;
  } catch (const ShapeError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitData;
  } catch (const NumericError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
}
