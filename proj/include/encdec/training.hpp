#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "encdec/checkpoint.hpp"
#include "encdec/config.hpp"
#include "encdec/model.hpp"
#include "encdec/ul2.hpp"

namespace encdec {

struct TrainOptions {
  double peak_lr = 1e-3;
  double min_lr = 1e-4;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 1000;
  double clip_norm = 1.0;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint
  std::size_t keep_last = 5;
  std::filesystem::path out_dir;        // empty: no checkpoints written
  DType checkpoint_dtype = DType::f64;

  void validate() const;
  KeyValues to_pairs() const;
  // Unknown key or bad value -> ConfigError. min_lr defaults to
  // 0.1 * peak_lr when only peak_lr is given.
  static TrainOptions from_pairs(const KeyValues& pairs);
};

// Linear warmup from 0, then cosine decay to min_lr at total_steps.
double lr_at(std::size_t step, const TrainOptions& opts);

struct ClipResult {
  double norm = 0.0;  // before clipping
  bool clipped = false;
};

// Scales every tensor by max_norm / ||g|| when the joint L2 norm exceeds
// max_norm. NumericError on a non-finite norm.
ClipResult clip_global_norm(ParamMap& grads, double max_norm = 1.0);

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
};

// "step\tlr\tloss\tgrad_norm\tclipped" with shortest round-trip doubles.
std::string format_metrics(const StepMetrics& m);

// Decoupled-weight-decay Adam over the trainable parameters of one model.
class AdamW {
 public:
  AdamW(const Model& model, const TrainOptions& opts);
  void step(Model& model, const ParamMap& grads, double lr);
  std::size_t steps() const { return t_; }

 private:
  TrainOptions opts_;
  ParamMap m_, v_;
  std::size_t t_ = 0;
};

struct BatchLoss {
  double loss = 0.0;  // mean over non-pad labels
  std::size_t tokens = 0;
  ParamMap grads;     // of the mean loss; frozen tensors omitted
};

// One forward/backward pass over a batch.
BatchLoss batch_loss(const Model& model, std::span<const ExamplePair> batch, std::span<const Tensor> images = {});

struct TrainReport {
  std::vector<StepMetrics> metrics;
  std::vector<std::filesystem::path> checkpoints;  // kept, oldest first
  std::filesystem::path averaged;                  // empty when none written
};

// Called after every step; returning false stops training early.
using StepCallback = std::function<bool(const StepMetrics&, const Model&)>;

// Examples are visited in a seeded shuffled order, reshuffled each epoch.
// Each step writes one metrics line to `log` when given. Checkpoints go to
// opts.out_dir as step_<N>.edck; the last keep_last are kept and averaged
// into averaged.edck at the end.
TrainReport train(Model& model, std::span<const ExamplePair> data, const TrainOptions& opts,
                  std::span<const Tensor> images = {}, std::ostream* log = nullptr,
                  const StepCallback& on_step = {});

struct EvalStats {
  std::size_t tokens = 0;
  std::size_t correct = 0;
  double nll = 0.0;

  double accuracy() const;
  double perplexity() const;
};

// Teacher-forced token accuracy and perplexity per denoiser tag.
std::map<std::uint8_t, EvalStats> eval_denoising(const Model& model, std::span<const ExamplePair> data,
                                                 std::span<const Tensor> images = {});
EvalStats merge_stats(const std::map<std::uint8_t, EvalStats>& by_tag);

// Copy task: the target equals the input sequence of ordinary tokens.
std::vector<ExamplePair> make_copy_examples(const TokenLayout& layout, std::size_t length, std::size_t count,
                                            std::uint64_t seed);

// Key-value retrieval: the encoder sees `pairs` distinct (key, value) token
// pairs; the target is [key, value] for one of them. Keys are ids
// [0, num_keys), values [num_keys, num_keys + num_values).
struct NeedleTask {
  std::size_t num_keys = 24;
  std::size_t num_values = 24;
};
std::vector<ExamplePair> make_needle_examples(const NeedleTask& task, std::size_t pairs, std::size_t count,
                                              std::uint64_t seed);

// Fraction of examples whose value is predicted exactly (argmax over the
// value ids after [BOS, key]) when the model runs with the given pi_scale.
double eval_needle(const Model& model, const NeedleTask& task, std::size_t pairs, double pi_scale,
                   std::size_t samples, std::uint64_t seed);

}  // namespace encdec
