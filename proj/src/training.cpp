#include "encdec/training.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <numeric>

#include <fmt/format.h>

#include "encdec/adaptation.hpp"
#include "encdec/errors.hpp"
#include "encdec/rng.hpp"

namespace encdec {

void TrainOptions::validate() const {
  if (total_steps == 0) throw ConfigError("total_steps must be positive");
  if (warmup_steps >= total_steps) {
    throw ConfigError(fmt::format("warmup_steps ({}) must be below total_steps ({})", warmup_steps, total_steps));
  }
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (!(peak_lr >= 0.0) || !(min_lr >= 0.0) || min_lr > peak_lr) {
    throw ConfigError(fmt::format("need 0 <= min_lr ({}) <= peak_lr ({})", min_lr, peak_lr));
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (keep_last == 0) throw ConfigError("keep_last must be positive");
}

KeyValues TrainOptions::to_pairs() const {
  return {
      {"peak_lr", format_double(peak_lr)},
      {"min_lr", format_double(min_lr)},
      {"warmup_steps", std::to_string(warmup_steps)},
      {"total_steps", std::to_string(total_steps)},
      {"clip_norm", format_double(clip_norm)},
      {"weight_decay", format_double(weight_decay)},
      {"beta1", format_double(beta1)},
      {"beta2", format_double(beta2)},
      {"adam_eps", format_double(adam_eps)},
      {"batch_size", std::to_string(batch_size)},
      {"seed", std::to_string(seed)},
      {"checkpoint_interval", std::to_string(checkpoint_interval)},
      {"keep_last", std::to_string(keep_last)},
      {"out_dir", out_dir.string()},
      {"checkpoint_dtype", dtype_name(checkpoint_dtype)},
  };
}

TrainOptions TrainOptions::from_pairs(const KeyValues& pairs) {
  TrainOptions o;
  bool min_given = false;
  for (const auto& [k, v] : pairs) {
    if (k == "peak_lr") o.peak_lr = parse_double(k, v);
    else if (k == "min_lr") { o.min_lr = parse_double(k, v); min_given = true; }
    else if (k == "warmup_steps") o.warmup_steps = parse_size(k, v);
    else if (k == "total_steps") o.total_steps = parse_size(k, v);
    else if (k == "clip_norm") o.clip_norm = parse_double(k, v);
    else if (k == "weight_decay") o.weight_decay = parse_double(k, v);
    else if (k == "beta1") o.beta1 = parse_double(k, v);
    else if (k == "beta2") o.beta2 = parse_double(k, v);
    else if (k == "adam_eps") o.adam_eps = parse_double(k, v);
    else if (k == "batch_size") o.batch_size = parse_size(k, v);
    else if (k == "seed") o.seed = parse_u64(k, v);
    else if (k == "checkpoint_interval") o.checkpoint_interval = parse_size(k, v);
    else if (k == "keep_last") o.keep_last = parse_size(k, v);
    else if (k == "out_dir") o.out_dir = v;
    else if (k == "checkpoint_dtype") o.checkpoint_dtype = parse_dtype(v);
    else throw ConfigError(fmt::format("unknown training option '{}'", k));
  }
  if (!min_given) o.min_lr = 0.1 * o.peak_lr;
  return o;
}

double lr_at(std::size_t step, const TrainOptions& opts) {
  const double peak = opts.peak_lr, floor = opts.min_lr;
  if (opts.warmup_steps > 0 && step <= opts.warmup_steps) {
    return peak * (static_cast<double>(step) / static_cast<double>(opts.warmup_steps));
  }
  if (step >= opts.total_steps) return floor;
  const double progress = static_cast<double>(step - opts.warmup_steps) /
                          static_cast<double>(opts.total_steps - opts.warmup_steps);
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

ClipResult clip_global_norm(ParamMap& grads, double max_norm) {
  double sum_sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.values()) sum_sq += v * v;
  ClipResult out{std::sqrt(sum_sq), false};
  if (!std::isfinite(out.norm)) throw NumericError(fmt::format("gradient norm is {}", out.norm));
  if (out.norm > max_norm) {
    out.clipped = true;
    for (auto& [name, g] : grads)
      for (double& v : g.values()) v = v * max_norm / out.norm;
  }
  return out;
}

std::string format_metrics(const StepMetrics& m) {
  return fmt::format("{}\t{}\t{}\t{}\t{}", m.step, format_double(m.lr), format_double(m.loss),
                     format_double(m.grad_norm), m.clipped ? 1 : 0);
}

AdamW::AdamW(const Model& model, const TrainOptions& opts) : opts_(opts) {
  for (const auto& [name, p] : model.params) {
    if (is_frozen(model.config, name)) continue;
    m_.emplace(name, Tensor::zeros(p.shape()));
    v_.emplace(name, Tensor::zeros(p.shape()));
  }
}

void AdamW::step(Model& model, const ParamMap& grads, double lr) {
  ++t_;
  const double b1 = opts_.beta1, b2 = opts_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& [name, p] : model.params) {
    auto g_it = grads.find(name);
    if (g_it == grads.end()) continue;
    const Tensor& g = g_it->second;
    Tensor& m = m_.at(name);
    Tensor& v = v_.at(name);
    const double decay = decays(model.config, name, p) ? opts_.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + opts_.adam_eps);
      p[i] -= lr * (update + decay * p[i]);
    }
  }
}

BatchLoss batch_loss(const Model& model, std::span<const ExamplePair> batch, std::span<const Tensor> images) {
  if (batch.empty()) throw DataError("empty batch");
  Tape tape;
  const ParamVars params = bind_params(tape, model, true);
  std::optional<Var> total;
  BatchLoss out;
  for (const ExamplePair& ex : batch) {
    const Seq2SeqOutput r = seq2seq_forward(model.config, params, ex.input, ex.target, images);
    out.tokens += r.tokens;
    total = total ? ad::add(*total, r.loss_sum) : r.loss_sum;
  }
  if (out.tokens == 0) throw DataError("batch has no non-pad target tokens");
  const Var mean = ad::scale(*total, 1.0 / static_cast<double>(out.tokens));
  out.loss = mean.value()[0];
  tape.backward(mean);
  for (const auto& [name, var] : params) {
    if (tape.requires_grad(var)) out.grads.emplace(name, tape.grad(var));
  }
  return out;
}

namespace {

void check_data(const Model& model, std::span<const ExamplePair> data, std::span<const Tensor> images) {
  const auto vocab = static_cast<std::int32_t>(model.config.vocab_size);
  auto bad = [vocab](std::int32_t id) { return id < 0 || id >= vocab; };
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (const SeqItem& item : data[i].input.items) {
      if (item.is_image() ? item.image_index >= images.size() : bad(item.token)) {
        throw DataError(fmt::format("example {}: input item outside the model vocabulary or image fixture", i));
      }
    }
    for (std::int32_t id : data[i].target) {
      if (bad(id)) throw DataError(fmt::format("example {}: target id {} outside vocabulary {}", i, id, vocab));
    }
  }
}

}  // namespace

TrainReport train(Model& model, std::span<const ExamplePair> data, const TrainOptions& opts,
                  std::span<const Tensor> images, std::ostream* log, const StepCallback& on_step) {
  opts.validate();
  if (data.empty()) throw DataError("no training examples");
  check_data(model, data, images);

  AdamW optimizer(model, opts);
  Rng order_rng(mix_seed(opts.seed, 0));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  order_rng.shuffle(order);
  std::size_t cursor = 0;

  TrainReport report;
  std::deque<std::filesystem::path> kept;
  if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);
  auto save = [&](std::size_t step) {
    if (opts.out_dir.empty()) return;
    const auto path = opts.out_dir / fmt::format("step_{}.edck", step);
    save_checkpoint(Checkpoint::from_model(model, step, opts.checkpoint_dtype), path);
    kept.push_back(path);
    while (kept.size() > opts.keep_last) {
      std::filesystem::remove(kept.front());
      kept.pop_front();
    }
  };

  std::vector<ExamplePair> batch;
  std::size_t last_saved = 0;
  for (std::size_t step = 1; step <= opts.total_steps; ++step) {
    batch.clear();
    while (batch.size() < opts.batch_size) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
    }
    StepMetrics m{step, lr_at(step, opts), 0.0, 0.0, false};
    BatchLoss bl;
    try {
      bl = batch_loss(model, batch, images);
      const ClipResult clip = clip_global_norm(bl.grads, opts.clip_norm);
      m.grad_norm = clip.norm;
      m.clipped = clip.clipped;
    } catch (const NumericError& e) {
      throw NumericError(fmt::format("training diverged at step {} (lr {}): {}", step, format_double(m.lr), e.what()));
    }
    m.loss = bl.loss;
    optimizer.step(model, bl.grads, m.lr);
    report.metrics.push_back(m);
    if (log) *log << format_metrics(m) << '\n' << std::flush;

    const bool stop = on_step && !on_step(m, model);
    if ((opts.checkpoint_interval && step % opts.checkpoint_interval == 0) || step == opts.total_steps || stop) {
      if (step != last_saved) save(step);
      last_saved = step;
    }
    if (stop) break;
  }

  report.checkpoints.assign(kept.begin(), kept.end());
  if (!kept.empty()) {
    std::vector<Checkpoint> loaded;
    for (const auto& p : kept) loaded.push_back(load_checkpoint(p));
    report.averaged = opts.out_dir / "averaged.edck";
    Checkpoint avg = average_checkpoints(loaded);
    avg.dtype = opts.checkpoint_dtype;
    save_checkpoint(avg, report.averaged);
  }
  return report;
}

double EvalStats::accuracy() const {
  return tokens ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0;
}

double EvalStats::perplexity() const { return tokens ? std::exp(nll / static_cast<double>(tokens)) : 0.0; }

std::map<std::uint8_t, EvalStats> eval_denoising(const Model& model, std::span<const ExamplePair> data,
                                                 std::span<const Tensor> images) {
  const std::int32_t pad = model.config.tokens().pad();
  std::map<std::uint8_t, EvalStats> out;
  for (const ExamplePair& ex : data) {
    Tape tape;
    const ParamVars params = bind_params(tape, model, false);
    const Seq2SeqOutput r = seq2seq_forward(model.config, params, ex.input, ex.target, images);
    const Tensor& logits = r.logits.value();
    EvalStats& s = out[ex.denoiser];
    for (std::size_t row = 0; row < r.labels.size(); ++row) {
      const std::int32_t label = r.labels[row];
      if (label == pad) continue;
      std::size_t best = 0;
      double max = logits.at(row, 0);
      for (std::size_t j = 1; j < logits.cols(); ++j) {
        if (logits.at(row, j) > max) {
          max = logits.at(row, j);
          best = j;
        }
      }
      double z = 0.0;
      for (std::size_t j = 0; j < logits.cols(); ++j) z += std::exp(logits.at(row, j) - max);
      s.nll += std::log(z) - (logits.at(row, static_cast<std::size_t>(label)) - max);
      s.correct += best == static_cast<std::size_t>(label);
      ++s.tokens;
    }
  }
  return out;
}

EvalStats merge_stats(const std::map<std::uint8_t, EvalStats>& by_tag) {
  EvalStats total;
  for (const auto& [tag, s] : by_tag) {
    total.tokens += s.tokens;
    total.correct += s.correct;
    total.nll += s.nll;
  }
  return total;
}

std::vector<ExamplePair> make_copy_examples(const TokenLayout& layout, std::size_t length, std::size_t count,
                                            std::uint64_t seed) {
  std::vector<ExamplePair> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i));
    ExamplePair ex;
    for (std::size_t j = 0; j < length; ++j) ex.target.push_back(static_cast<std::int32_t>(rng.below(layout.ordinary())));
    ex.input = MixedSequence::from_tokens(ex.target);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<ExamplePair> make_needle_examples(const NeedleTask& task, std::size_t pairs, std::size_t count,
                                              std::uint64_t seed) {
  if (pairs == 0 || pairs > task.num_keys) {
    throw ConfigError(fmt::format("needle haystack of {} pairs needs 1..{} keys", pairs, task.num_keys));
  }
  std::vector<ExamplePair> out;
  std::vector<std::int32_t> keys(task.num_keys);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, i));
    std::iota(keys.begin(), keys.end(), 0);
    rng.shuffle(keys);
    ExamplePair ex;
    std::vector<std::int32_t> values;
    for (std::size_t p = 0; p < pairs; ++p) {
      values.push_back(static_cast<std::int32_t>(task.num_keys + rng.below(task.num_values)));
      ex.input.items.push_back(SeqItem::tok(keys[p]));
      ex.input.items.push_back(SeqItem::tok(values.back()));
    }
    const std::size_t q = rng.below(pairs);
    ex.target = {keys[q], values[q]};
    out.push_back(std::move(ex));
  }
  return out;
}

double eval_needle(const Model& model, const NeedleTask& task, std::size_t pairs, double pi_scale,
                   std::size_t samples, std::uint64_t seed) {
  if (samples == 0) return 0.0;
  Model scaled = model;
  scaled.config.pi_scale = pi_scale;
  scaled.config.validate();
  const std::int32_t bos = model.config.tokens().bos();
  std::size_t hits = 0;
  for (const ExamplePair& ex : make_needle_examples(task, pairs, samples, seed)) {
    const Tensor h = encode(scaled, ex.input);
    const std::vector<std::int32_t> inputs{bos, ex.target[0]};
    const Tensor logits = decode(scaled, h, inputs);
    // Argmax over the value ids only.
    std::size_t best = task.num_keys;
    for (std::size_t j = best + 1; j < task.num_keys + task.num_values; ++j)
      if (logits.at(1, j) > logits.at(1, best)) best = j;
    hits += static_cast<std::int32_t>(best) == ex.target[1];
  }
  return static_cast<double>(hits) / static_cast<double>(samples);
}

}  // namespace encdec
