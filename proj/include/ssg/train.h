#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <vector>

#include "ssg/checkpoint.h"
#include "ssg/config.h"
#include "ssg/dataset.h"

namespace ssg {

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> losses;  // one per step
};

using TrainProgress = std::function<void(size_t step, double loss)>;

// Plain SGD on the denoising objective. Minibatches are drawn with
// replacement from GenerateDataset(config.dataset, config.train.seed).
// Every step uses its own stream, so the result is a pure function of the
// config. When loss_csv is non-null a "step,loss" row is written per step.
// A non-finite loss throws NumericalError naming the step.
TrainResult Train(const RunConfig& config, std::ostream* loss_csv = nullptr,
                  const TrainProgress& progress = {});

// The initial parameters used by Train.
ModelParameters InitialParameters(const RunConfig& config);

// Applies params -= lr * grads.
void SgdUpdate(ModelParameters& params, const ModelParameters& grads, double lr);

}  // namespace ssg
