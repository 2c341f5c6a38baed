#pragma once

#include <stdexcept>
#include <string>

namespace coinlab {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonScalarLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SearchSpaceTooLarge : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InfiniteLogProb : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateStates : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnsupportedArchitecture : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when a training loop produces a non-finite loss; carries the
// step and gradient norm observed at the point of failure.
struct TrainingDiverged : std::runtime_error {
  int step;
  double grad_norm;
  TrainingDiverged(int step_, double grad_norm_, const std::string& what_)
      : std::runtime_error(what_), step(step_), grad_norm(grad_norm_) {}
};

struct InvalidConfig : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace coinlab
