#pragma once

#include "rsa/config.hpp"

namespace rsa::testing {

// Smallest configuration that exercises every pipeline stage in seconds.
inline ExperimentConfig tiny_experiment(std::uint64_t seed = 3) {
  ExperimentConfig c = ExperimentConfig::desk();
  c.seed = seed;
  c.deterministic = true;
  c.data.synth.num_train_source = 24;
  c.data.synth.num_train_target = 6;
  c.data.synth.num_test_target = 5;

  c.translator.model.net.base_width = 8;
  c.translator.model.net.channel_mult = {1, 2};
  c.translator.model.net.groups = 4;
  c.translator.model.num_steps = 100;
  c.translator.train.phase1_epochs = 1;
  c.translator.train.phase2_epochs = 1;
  c.translator.train.batch_size = 8;
  c.translator.train.heldout = 4;

  c.segmenter.model.net.base_width = 8;
  c.segmenter.model.net.levels = 3;
  c.segmenter.model.net.groups = 4;
  c.segmenter.train.epochs = 2;
  c.segmenter.train.batch_size = 8;
  c.segmenter.heldout = 4;

  c.selector.ddim_steps = 4;
  c.selector.selector.t_r = 1.0;  // accept everything so adaptation always has data
  c.adapt.centralized.epochs = 1;
  c.adapt.centralized.batch_size = 8;
  c.adapt.batch_based.batch_size = 4;
  c.finalize();
  return c;
}

}  // namespace rsa::testing
