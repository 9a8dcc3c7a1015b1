#include "ssg/train.h"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>

#include "ssg/errors.h"

namespace ssg {

ModelParameters InitialParameters(const RunConfig& config) {
  RngStream rng = RngStream::ForPurpose(config.train.seed, "init");
  return ModelParameters::Initialize(config.model, rng);
}

void SgdUpdate(ModelParameters& params, const ModelParameters& grads, double lr) {
  auto p = params.Tensors();
  const auto g = grads.Tensors();
  if (p.size() != g.size()) throw ShapeError("SgdUpdate: parameter layout mismatch");
  for (size_t i = 0; i < p.size(); ++i) {
    std::vector<double>& dst = *p[i].values;
    const std::vector<double>& src = *g[i].values;
    if (dst.size() != src.size()) throw ShapeError("SgdUpdate: size mismatch in " + p[i].name);
    for (size_t k = 0; k < dst.size(); ++k) dst[k] -= lr * src[k];
  }
}

TrainResult Train(const RunConfig& config, std::ostream* loss_csv,
                  const TrainProgress& progress) {
  config.Validate();
  const ModelConfig& cfg = config.model;
  const NoiseSchedule schedule = config.schedule.Build();
  const LabeledImages data = GenerateDataset(config.dataset, config.train.seed);
  const TokenTensor all = PatchifyBatch(data.pixels, data.count(), cfg);
  const std::vector<Condition> labels = Conditions(data);

  TrainResult result;
  result.checkpoint.model = cfg;
  result.checkpoint.schedule = config.schedule;
  result.checkpoint.params = InitialParameters(config);
  result.losses.reserve(config.train.steps);
  if (loss_csv) *loss_csv << "step,loss\n" << std::setprecision(17);

  const size_t batch = config.train.batch;
  const size_t inst = all.instance_size();
  TokenTensor x0(batch, cfg.tokens(), cfg.patch_dim());
  std::vector<Condition> batch_labels(batch);
  for (size_t step = 0; step < config.train.steps; ++step) {
    RngStream rng = RngStream::ForPurpose(config.train.seed, "train-step", step);
    for (size_t b = 0; b < batch; ++b) {
      const size_t idx = rng.UniformIndex(data.count());
      auto src = all.instance(idx);
      std::copy(src.begin(), src.end(), x0.mutable_data().begin() + b * inst);
      batch_labels[b] = labels[idx];
    }
    DsmLossResult r;
    try {
      r = DsmLoss(result.checkpoint.params, cfg, schedule, x0, batch_labels, rng);
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step) + ": " +
                           e.what());
    }
    if (!std::isfinite(r.loss)) {
      throw NumericalError("non-finite loss at step " + std::to_string(step));
    }
    SgdUpdate(result.checkpoint.params, r.grads, config.train.learning_rate);
    result.losses.push_back(r.loss);
    result.checkpoint.step = step + 1;
    if (loss_csv) *loss_csv << step << ',' << r.loss << '\n';
    if (progress) progress(step, r.loss);
  }
  return result;
}

}  // namespace ssg
