#pragma once

// A scaled-down model and dataset that train in well under a second per step.

#include <vector>

#include "synmesh/gen_pathway.hpp"
#include "synmesh/scene_synth.hpp"
#include "synmesh/training.hpp"

namespace synmesh::testkit {

inline train::ModelConfig tiny_model() {
  train::ModelConfig m;
  m.image_size = 32;
  m.body = body::BodyDims{40, 24, 4, 4};
  m.patch = 8;
  m.vit_dim = 16;
  m.vit_heads = 4;
  m.vit_blocks = 2;
  m.ae_hidden = 8;
  m.unet_base = 8;
  m.unet_mid = 16;
  m.d_prompt = 16;
  m.dim = 16;
  m.dictionary_entries = 6;
  m.guidance_tokens = 2;
  m.fuse_levels = 1;
  m.cau_blocks = 1;
  m.head_blocks = 1;
  m.max_instances = 3;
  return m;
}

inline scene::SceneConfig tiny_scenes() {
  scene::SceneConfig s;
  s.height = s.width = 32;
  s.max_instances = 2;
  s.instance_limit = 3;
  return s;
}

inline train::TrainConfig tiny_train() {
  train::TrainConfig c;
  c.model = tiny_model();
  c.steps = 4;
  c.batch_size = 2;
  c.log_every = 1;
  return c;
}

inline gen::GenerativePathway tiny_pathway(const train::ModelConfig& m) {
  torch::manual_seed(99);
  gen::GenerativePathway g(m.generative());
  g->mark_pretrained();
  return g;
}

}  // namespace synmesh::testkit
