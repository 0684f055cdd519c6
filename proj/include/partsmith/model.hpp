// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partsmith/autodiff.hpp"
#include "partsmith/checksum.hpp"
#include "partsmith/denoiser.hpp"
#include "partsmith/discovery.hpp"
#include "partsmith/losses.hpp"
#include "partsmith/pretrain.hpp"
#include "partsmith/psfm.hpp"
#include "partsmith/rng.hpp"
#include "partsmith/token_space.hpp"

namespace partsmith {

struct TrainConfig {
  std::size_t batch_size = 2;
  std::size_t epochs = 100;
  std::size_t max_steps = 0;  // 0: epochs * ceil(N / batch_size)
  std::size_t grad_accumulation = 1;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_attn = kDefaultLambdaAttn;
  AttnLossKind attn_loss = AttnLossKind::entropy;
  bool horizontal_flip = true;
  std::size_t image_size = 512;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
  std::size_t checkpoint_every = 1000;
  std::size_t lora_rank = kDefaultLoraRank;
  double lora_alpha = kDefaultLoraAlpha;
  bool use_projector = true;
  std::size_t hidden_dim = 0;  // 0: 2 * embed_dim
  std::string template_text = kDefaultTemplate;
  ToyDenoiserConfig backend;

  bool operator==(const TrainConfig&) const = default;
};

inline void validate(const TrainConfig& c) {
  require(c.batch_size > 0 && c.epochs > 0 && c.grad_accumulation > 0 && c.image_size > 0,
          ErrorKind::validation, "batch size, epochs, accumulation and image size must be positive");
  require(c.lr > 0.0 && c.weight_decay >= 0.0 && c.lambda_attn >= 0.0, ErrorKind::validation,
          "learning rate must be positive; weight decay and lambda_attn non-negative");
  require(c.lora_rank > 0 && c.log_every > 0 && c.checkpoint_every > 0, ErrorKind::validation,
          "LoRA rank and logging/checkpoint cadence must be positive");
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"max_steps", c.max_steps},
       {"grad_accumulation", c.grad_accumulation},
       {"optimizer", {{"name", "adamw"}, {"lr", c.lr}, {"weight_decay", c.weight_decay},
                      {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.adam_eps}}},
       {"lambda_attn", c.lambda_attn},
       {"attn_loss", c.attn_loss == AttnLossKind::entropy ? "entropy" : "mse"},
       {"augmentation", c.horizontal_flip ? "hflip" : "none"},
       {"image_size", c.image_size},
       {"seed", c.seed},
       {"log_every", c.log_every},
       {"checkpoint_every", c.checkpoint_every},
       {"lora", {{"rank", c.lora_rank}, {"alpha", c.lora_alpha}}},
       {"use_projector", c.use_projector},
       {"hidden_dim", c.hidden_dim},
       {"template", c.template_text},
       {"backend", c.backend}};
}

/// Missing keys keep their current values, so partial config files merge over a preset.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.grad_accumulation = j.value("grad_accumulation", c.grad_accumulation);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    require(o.value("name", std::string("adamw")) == "adamw", ErrorKind::validation,
            "only the adamw optimizer is supported");
    c.lr = o.value("lr", c.lr);
    c.weight_decay = o.value("weight_decay", c.weight_decay);
    c.beta1 = o.value("beta1", c.beta1);
    c.beta2 = o.value("beta2", c.beta2);
    c.adam_eps = o.value("eps", c.adam_eps);
  }
  c.lambda_attn = j.value("lambda_attn", c.lambda_attn);
  const std::string kind = j.value("attn_loss", std::string(c.attn_loss == AttnLossKind::mse ? "mse" : "entropy"));
  require(kind == "entropy" || kind == "mse", ErrorKind::validation, "attn_loss must be entropy or mse");
  c.attn_loss = kind == "entropy" ? AttnLossKind::entropy : AttnLossKind::mse;
  const std::string aug = j.value("augmentation", std::string(c.horizontal_flip ? "hflip" : "none"));
  require(aug == "hflip" || aug == "none", ErrorKind::validation, "augmentation must be hflip or none");
  c.horizontal_flip = aug == "hflip";
  c.image_size = j.value("image_size", c.image_size);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  if (j.contains("lora")) {
    c.lora_rank = j.at("lora").value("rank", c.lora_rank);
    c.lora_alpha = j.at("lora").value("alpha", c.lora_alpha);
  }
  c.use_projector = j.value("use_projector", c.use_projector);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.template_text = j.value("template", c.template_text);
  if (j.contains("backend")) from_json(j.at("backend"), c.backend);
}

/// Everything a generation needs: frozen toy denoiser plus LoRA, token dictionary,
/// projector and the frozen word table.
struct CreatureModel {
  TrainConfig config;
  std::size_t M = 0;
  std::size_t K = 0;
  WordEmbedder words;
  ToyDenoiser backend;
  TokenDictionary tokens;
  Projector projector;
  Matrix template_vectors;

  static CreatureModel create(const TrainConfig& cfg, std::size_t M, std::size_t K) {
    validate(cfg);
    CreatureModel model;
    model.config = cfg;
    model.M = M;
    model.K = K;
    model.words = WordEmbedder(cfg.backend.embed_dim, cfg.backend.seed);
    model.backend = make_base(cfg.backend);
    Rng init(cfg.seed ^ 0x696E6974ull);
    model.tokens = TokenDictionary::create(M, K, model.words, init);
    const std::size_t hidden = cfg.hidden_dim > 0 ? cfg.hidden_dim : 2 * cfg.backend.embed_dim;
    model.projector = cfg.use_projector ? Projector::create(cfg.backend.embed_dim, hidden, init)
                                        : Projector::pass_through();
    model.backend.attach_lora(cfg.lora_rank, cfg.lora_alpha, init);
    model.template_vectors = model.words.embed_words(split_words(cfg.template_text));
    for (ad::Param* p : model.trainable()) detail::round_to_float(p->value);
    return model;
  }

  std::vector<ad::Param*> trainable() {
    std::vector<ad::Param*> out = {&tokens.table};
    for (ad::Param* p : projector.params()) out.push_back(p);
    for (ad::Param* p : backend.lora_params()) out.push_back(p);
    return out;
  }

  Conditioning condition(const PromptCode& code, const std::string& style_suffix = {}) {
    const Matrix suffix = words.embed_words(split_words(style_suffix));
    return {embed_code(code, tokens, projector, template_vectors, suffix), M + 1};
  }

  std::string prompt_text(const PromptCode& code, const std::string& style_suffix = {}) const {
    std::string text = config.template_text;
    for (const auto& p : code.pairs)
      if (p.present) text += " [" + std::to_string(p.channel) + "," + std::to_string(p.split) + "]";
    if (!style_suffix.empty()) text += " " + style_suffix;
    return text;
  }
};

struct AdamWState {
  std::size_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

/// Decoupled weight decay Adam over `params` (same order every call).
inline void adamw_step(const std::vector<ad::Param*>& params, AdamWState& st, const TrainConfig& c) {
  if (st.m.size() != params.size()) {
    st.m.clear();
    st.v.clear();
    for (ad::Param* p : params) {
      st.m.emplace_back(p->value.rows, p->value.cols);
      st.v.emplace_back(p->value.rows, p->value.cols);
    }
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->value.data;
    const auto& g = params[i]->grad.data;
    auto& m = st.m[i].data;
    auto& v = st.v[i].data;
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k] -= c.lr * c.weight_decay * w[k];
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      w[k] -= c.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + c.adam_eps);
    }
    // Values at rest are float32 so checkpoints restore them exactly.
    detail::round_to_float(params[i]->value);
    detail::round_to_float(st.m[i]);
    detail::round_to_float(st.v[i]);
  }
}

struct TrainState {
  std::size_t step = 0;
  Rng rng;
  AdamWState optimizer;
  double loss_ema = 0.0;
  std::vector<LossReport> history;  // one entry per optimizer step
  std::vector<std::string> lineage;
};

// ---- checkpoints ------------------------------------------------------------------

inline constexpr const char* kCheckpointFile = "checkpoint.json";

struct CheckpointInfo {
  std::filesystem::path dictionary_dir;
  std::string dictionary_checksum;
};

namespace detail {

inline nlohmann::json pack_blocks(const std::vector<const Matrix*>& mats,
                                  const std::vector<std::string>& names, std::string& blob) {
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < mats.size(); ++i) {
    const Matrix& m = *mats[i];
    const std::size_t offset = blob.size();
    blob += psfm::encode(psfm::from_doubles(static_cast<std::uint32_t>(m.rows), 1,
                                            static_cast<std::uint32_t>(m.cols), m.data));
    index.push_back({{"name", names[i]}, {"rows", m.rows}, {"cols", m.cols}, {"offset", offset}});
  }
  return index;
}

inline void unpack_blocks(const nlohmann::json& index, const std::string& blob,
                          const std::vector<Matrix*>& mats, const std::vector<std::string>& names) {
  require(index.size() == mats.size(), ErrorKind::corruption, "checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < mats.size(); ++i) {
    const auto& e = index.at(i);
    require(e.at("name").get<std::string>() == names[i], ErrorKind::corruption,
            "checkpoint parameter order mismatch at " + names[i]);
    const auto offset = e.at("offset").get<std::size_t>();
    require(offset <= blob.size(), ErrorKind::corruption, "checkpoint block offset out of range");
    const psfm::Block b = psfm::decode(std::string_view(blob).substr(offset));
    const auto rows = e.at("rows").get<std::size_t>(), cols = e.at("cols").get<std::size_t>();
    require(b.grid_h == rows && b.dim == cols && mats[i]->rows == rows && mats[i]->cols == cols,
            ErrorKind::corruption, "checkpoint block shape mismatch for " + names[i]);
    mats[i]->data = psfm::to_doubles(b);
  }
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, CreatureModel& model,
                            const TrainState& state, const CheckpointInfo& info) {
  std::filesystem::create_directories(dir);
  auto params = model.trainable();
  std::vector<const Matrix*> values;
  std::vector<std::string> names;
  for (ad::Param* p : params) {
    values.push_back(&p->value);
    names.push_back(p->name);
  }
  std::string blob;
  const nlohmann::json param_index = detail::pack_blocks(values, names, blob);
  std::string opt_blob;
  nlohmann::json opt_index = nlohmann::json::array();
  if (!state.optimizer.m.empty()) {
    std::vector<const Matrix*> moments;
    std::vector<std::string> moment_names;
    for (std::size_t i = 0; i < params.size(); ++i) {
      moments.push_back(&state.optimizer.m[i]);
      moment_names.push_back(names[i] + ".m");
      moments.push_back(&state.optimizer.v[i]);
      moment_names.push_back(names[i] + ".v");
    }
    opt_index = detail::pack_blocks(moments, moment_names, opt_blob);
  }
  psfm::write_file_bytes(dir / "params.bin", blob);
  psfm::write_file_bytes(dir / "optimizer.bin", opt_blob);
  // A pretrained base is stored too so loading does not repeat the pretraining.
  nlohmann::json base = {{"checksum", base_checksum(model.backend)}};
  if (model.config.backend.pretrain_steps > 0) {
    std::string base_blob;
    std::vector<const Matrix*> mats;
    std::vector<std::string> base_names;
    for (ad::Param* p : model.backend.base_params()) {
      mats.push_back(&p->value);
      base_names.push_back(p->name);
    }
    base["blocks"] = detail::pack_blocks(mats, base_names, base_blob);
    base["file_checksum"] = sha256_hex(base_blob);
    psfm::write_file_bytes(dir / "base.bin", base_blob);
  }
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : state.history) history.push_back({r.l_ldm, r.l_attn, r.l_total});
  nlohmann::json j = {
      {"format", "partsmith-checkpoint"},
      {"version", 1},
      {"step", state.step},
      {"config", model.config},
      {"M", model.M},
      {"K", model.K},
      {"backend", {{"kind", "toy"}, {"config", model.config.backend},
                   {"lora_rank", model.backend.lora_rank()}, {"lora_alpha", model.backend.lora_alpha()}}},
      {"base", base},
      {"dictionary", {{"path", info.dictionary_dir.string()}, {"checksum", info.dictionary_checksum}}},
      {"rng_state", state.rng.state()},
      {"loss_ema", state.loss_ema},
      {"history", history},
      {"lineage", state.lineage},
      {"params", param_index},
      {"params_checksum", sha256_hex(blob)},
      {"optimizer", {{"step", state.optimizer.step}, {"blocks", opt_index},
                     {"checksum", sha256_hex(opt_blob)}}},
  };
  psfm::write_file_bytes(dir / kCheckpointFile, j.dump(2) + "\n");
}

struct LoadedCheckpoint {
  CreatureModel model;
  TrainState state;
  CheckpointInfo info;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / kCheckpointFile))
    fail(ErrorKind::validation, "no checkpoint at " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(psfm::read_file_bytes(dir / kCheckpointFile));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("malformed checkpoint manifest: ") + e.what());
  }
  require(j.value("format", "") == "partsmith-checkpoint" && j.value("version", 0) == 1,
          ErrorKind::format, "unsupported checkpoint manifest");
  LoadedCheckpoint out;
  const auto cfg = j.at("config").get<TrainConfig>();
  const nlohmann::json base = j.value("base", nlohmann::json::object());
  if (cfg.backend.pretrain_steps > 0 && base.contains("blocks")) {
    const std::string base_blob = psfm::read_file_bytes(dir / "base.bin");
    require(sha256_hex(base_blob) == base.at("file_checksum").get<std::string>(), ErrorKind::corruption,
            "checkpoint base weight checksum mismatch");
    ToyDenoiser shape(cfg.backend);
    std::vector<Matrix> values;
    std::vector<std::string> base_names;
    for (ad::Param* p : shape.base_params()) {
      values.push_back(p->value);
      base_names.push_back(p->name);
    }
    std::vector<Matrix*> ptrs;
    for (Matrix& m : values) ptrs.push_back(&m);
    detail::unpack_blocks(base.at("blocks"), base_blob, ptrs, base_names);
    register_base(cfg.backend, std::move(values));
  }
  out.model = CreatureModel::create(cfg, j.at("M").get<std::size_t>(), j.at("K").get<std::size_t>());
  out.info.dictionary_dir = j.at("dictionary").at("path").get<std::string>();
  out.info.dictionary_checksum = j.at("dictionary").at("checksum").get<std::string>();
  if (base.contains("checksum"))
    require(base_checksum(out.model.backend) == base.at("checksum").get<std::string>(), ErrorKind::corruption,
            "base weights differ from the ones the checkpoint was trained on");
  const std::string blob = psfm::read_file_bytes(dir / "params.bin");
  require(sha256_hex(blob) == j.at("params_checksum").get<std::string>(), ErrorKind::corruption,
          "checkpoint parameter checksum mismatch");
  auto params = out.model.trainable();
  std::vector<Matrix*> values;
  std::vector<std::string> names;
  for (ad::Param* p : params) {
    values.push_back(&p->value);
    names.push_back(p->name);
  }
  detail::unpack_blocks(j.at("params"), blob, values, names);

  out.state.step = j.at("step").get<std::size_t>();
  out.state.rng.restore(j.at("rng_state").get<std::string>());
  out.state.loss_ema = j.at("loss_ema").get<double>();
  for (const auto& h : j.at("history")) {
    LossReport r;
    r.l_ldm = h.at(0).get<double>();
    r.l_attn = h.at(1).get<double>();
    r.l_total = h.at(2).get<double>();
    r.lambda_attn = cfg.lambda_attn;
    out.state.history.push_back(r);
  }
  out.state.lineage = j.at("lineage").get<std::vector<std::string>>();
  const auto& opt = j.at("optimizer");
  out.state.optimizer.step = opt.at("step").get<std::size_t>();
  if (!opt.at("blocks").empty()) {
    const std::string opt_blob = psfm::read_file_bytes(dir / "optimizer.bin");
    require(sha256_hex(opt_blob) == opt.at("checksum").get<std::string>(), ErrorKind::corruption,
            "checkpoint optimizer checksum mismatch");
    std::vector<Matrix*> moments;
    std::vector<std::string> moment_names;
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.state.optimizer.m.emplace_back(params[i]->value.rows, params[i]->value.cols);
      out.state.optimizer.v.emplace_back(params[i]->value.rows, params[i]->value.cols);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      moments.push_back(&out.state.optimizer.m[i]);
      moment_names.push_back(names[i] + ".m");
      moments.push_back(&out.state.optimizer.v[i]);
      moment_names.push_back(names[i] + ".v");
    }
    detail::unpack_blocks(opt.at("blocks"), opt_blob, moments, moment_names);
  }
  return out;
}

}  // namespace partsmith
