#pragma once

#include <memory>
#include <vector>

#include "diffprune/data.hpp"
#include "diffprune/model.hpp"
#include "diffprune/pipeline.hpp"
#include "diffprune/tasks.hpp"

namespace diffprune::testing {

/// Small MLP and suite that train in well under a second.
inline ModelSpec tiny_mlp() {
  ModelSpec spec;
  spec.depth = 2;
  spec.width = 16;
  return spec;
}

inline SuiteConfig tiny_suite() {
  SuiteConfig cfg;
  cfg.n_train = 512;
  cfg.n_validation = 256;
  return cfg;
}

inline TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::kAdam;
  cfg.lambda = 3e-4;
  cfg.learning_rate = 0.01;
  cfg.alpha_learning_rate = 0.03;
  cfg.finetune_learning_rate = 0.01;
  cfg.epochs_train = 3;
  cfg.epochs_finetune = 2;
  return cfg;
}

/// Pretrained tiny MLP shared by the tests of one binary.
struct Pretrained {
  ToyModel model{tiny_mlp()};
  std::vector<float> theta;

  Pretrained() {
    TrainConfig cfg = tiny_train();
    cfg.epochs_train = 4;
    theta = full_finetune(model, model.init_params(1), make_task("base", tiny_suite()), cfg);
  }

  static const Pretrained& get() {
    static const Pretrained instance;
    return instance;
  }
};

/// Model whose logits ignore the parameters, so the risk is constant.
class ConstantModel {
 public:
  explicit ConstantModel(SpacePtr space, std::size_t classes = 2) : space_(std::move(space)), classes_(classes) {}

  Var forward(Graph<float>& g, Var /*params*/, Batch batch) const {
    return g.constant(Tensor<float>::zeros({batch.size(), classes_}));
  }
  const SpacePtr& space() const { return space_; }

 private:
  SpacePtr space_;
  std::size_t classes_;
};

inline SpacePtr small_space() {
  auto space = std::make_shared<FlatParamSpace>();
  space->add("layer0.weight", {3, 2}, 0);
  space->add("layer0.bias", {2}, 0);
  space->add("layer1.weight", {2, 2}, 1);
  space->add("head.weight", {2, 2}, 2, true);
  return space;
}

}  // namespace diffprune::testing
