// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Command-line front end. `run_cli` is the whole program minus process plumbing so
// tests can drive it in-process.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "partsmith/composition.hpp"
#include "partsmith/discovery.hpp"
#include "partsmith/evaluation.hpp"
#include "partsmith/experiment.hpp"
#include "partsmith/feature_io.hpp"
#include "partsmith/image.hpp"
#include "partsmith/model.hpp"
#include "partsmith/remote_backend.hpp"
#include "partsmith/run_manifest.hpp"
#include "partsmith/service.hpp"
#include "partsmith/toy_task.hpp"
#include "partsmith/training.hpp"

namespace partsmith::cli {

namespace fs = std::filesystem;

inline constexpr const char* kBackendEnv = "PARTSMITH_BACKEND_URL";
inline constexpr const char* kImagesDir = "images";

/// "toy", "remote:URL" or empty (then the environment decides, falling back to toy).
inline std::string resolve_backend_spec(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kBackendEnv); env != nullptr && *env != '\0') return env;
  return "toy";
}

/// Null for the bundled toy denoiser.
inline std::unique_ptr<remote::RemoteBackend> open_backend(const std::string& spec) {
  if (spec == "toy") return nullptr;
  require(spec.rfind("remote:", 0) == 0 || spec.rfind("http", 0) == 0, ErrorKind::validation,
          "backend must be 'toy' or 'remote:URL', got '" + spec + "'");
  return std::make_unique<remote::RemoteBackend>(spec);
}

/// A checkpoint directory, or a training run directory whose `latest` names one.
inline fs::path resolve_checkpoint(const fs::path& p) {
  require(!p.empty(), ErrorKind::validation, "a checkpoint (--ckpt) is required");
  if (fs::exists(p / "checkpoint.json")) return p;
  if (fs::exists(p / "latest")) {
    std::string name = psfm::read_file_bytes(p / "latest");
    while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
    require(fs::exists(p / name / "checkpoint.json"), ErrorKind::corruption,
            (p / "latest").string() + " names a missing checkpoint");
    return p / name;
  }
  fail(ErrorKind::validation, "no checkpoint at " + p.string());
}

/// Manifest for a single-file output, written next to it.
inline void write_file_manifest(const fs::path& file, RunManifest m) {
  const fs::path dir = file.has_parent_path() ? file.parent_path() : fs::path(".");
  m.artifacts = {{file.filename().string(), file_sha256(file)}};
  psfm::write_file_bytes(dir / kRunManifestFile, to_json(m).dump(2) + "\n");
}

inline FileDigest input_digest(const fs::path& p) {
  if (fs::is_regular_file(p)) return {fs::absolute(p).lexically_normal().string(), file_sha256(p)};
  // Directories are summarised by the digest of their sorted file digests.
  std::string all;
  for (const auto& f : digest_tree(p)) all += f.path + ":" + f.sha256 + "\n";
  return {fs::absolute(p).lexically_normal().string(), sha256_hex(all)};
}

inline std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      fail(ErrorKind::usage, "not a number: '" + item + "'");
    }
  }
  return out;
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  for (double v : parse_doubles(csv)) out.push_back(static_cast<std::uint64_t>(v));
  return out;
}

struct Corpus {
  FeatureCorpus features;
  std::vector<std::string> ids;
  std::vector<FeatureMap> maps;
};

inline Corpus load_corpus(const fs::path& dir) {
  require(!dir.empty(), ErrorKind::validation, "a feature directory (--features) is required");
  Corpus c{read_corpus(dir), {}, {}};
  c.maps = c.features.load_all();
  for (const auto& fm : c.maps) c.ids.push_back(fm.image_id);
  return c;
}

inline std::vector<RgbImage> load_images(const fs::path& dir, const std::vector<std::string>& ids) {
  std::vector<RgbImage> out;
  for (const auto& id : ids) {
    const fs::path p = dir / (id + ".ppm");
    require(fs::exists(p), ErrorKind::validation, "missing training image " + p.string());
    out.push_back(read_ppm(p));
  }
  return out;
}

inline std::vector<TaggedCode> tag_corpus(const Corpus& c, const SubConceptDictionary& dict) {
  std::vector<TaggedCode> out;
  for (std::size_t i = 0; i < c.maps.size(); ++i) out.push_back({c.ids[i], tag_image(c.maps[i], dict).code});
  return out;
}

inline nlohmann::json read_json_file(const fs::path& p) {
  require(fs::exists(p), ErrorKind::validation, "no such file " + p.string());
  try {
    return nlohmann::json::parse(psfm::read_file_bytes(p));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, p.string() + " is not valid JSON: " + e.what());
  }
}

inline void write_json_file(const fs::path& p, const nlohmann::json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  psfm::write_file_bytes(p, j.dump(2) + "\n");
}

inline httplib::Server* g_server = nullptr;

inline void stop_server(int) {
  if (g_server != nullptr) g_server->stop();
}

/// Parses and runs one command line. Errors are reported on `err`; the return value
/// is the process exit code.
inline int run_cli(const std::vector<std::string>& argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"partsmith: part-level sub-concept discovery, training and composition"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");
  RunManifest manifest;
  manifest.args = argv;
  std::function<void()> action;

  // extract
  auto* extract = app.add_subcommand("extract", "Compute patch features for a folder of PPM images or the toy set");
  struct {
    std::string images, out, dataset;
    std::size_t toy = 0, dim = 32, patch = 4;
    std::uint64_t seed = 0;
  } ex;
  extract->add_option("--images", ex.images, "Folder of .ppm images");
  extract->add_option("--toy", ex.toy, "Render N synthetic creatures instead of reading images");
  extract->add_option("--out", ex.out, "Output directory")->required();
  extract->add_option("--dataset", ex.dataset, "Dataset name recorded in the manifest");
  extract->add_option("--dim", ex.dim, "Feature dimension")->capture_default_str();
  extract->add_option("--patch", ex.patch, "Patch size in pixels")->capture_default_str();
  extract->add_option("--seed", ex.seed, "Toy layout seed")->capture_default_str();
  extract->callback([&] {
    action = [&] {
      require(ex.toy > 0 || !ex.images.empty(), ErrorKind::validation, "extract needs --images DIR or --toy N");
      require(ex.toy == 0 || ex.images.empty(), ErrorKind::validation, "--images and --toy are exclusive");
      const StubExtractor extractor(ex.dim, ex.patch);
      std::vector<std::string> ids;
      std::vector<RgbImage> images;
      if (ex.toy > 0) {
        const auto creatures = toy::creatures(ex.toy, ex.seed);
        for (std::size_t i = 0; i < creatures.size(); ++i) {
          ids.push_back(toy::image_id(i));
          images.push_back(toy::render(creatures[i]));
        }
        if (ex.dataset.empty()) ex.dataset = "toy";
      } else {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(ex.images))
          if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        require(!files.empty(), ErrorKind::validation, "no .ppm images in " + ex.images);
        for (const auto& f : files) {
          ids.push_back(f.stem().string());
          images.push_back(read_ppm(f));
        }
        manifest.inputs.push_back(input_digest(ex.images));
      }
      std::vector<FeatureMap> maps;
      fs::create_directories(fs::path(ex.out) / kImagesDir);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        maps.push_back(extract_features(images[i], extractor, ids[i]));
        psfm::write_file_bytes(fs::path(ex.out) / kImagesDir / (ids[i] + ".ppm"), encode_ppm(images[i]));
      }
      write_corpus(ex.out, ex.dataset, maps);
      manifest.seeds = {{"toy_layout", ex.seed}};
      manifest.config = {{"extractor", extractor.name()}, {"dim", ex.dim}, {"patch", ex.patch}, {"toy", ex.toy}};
      write_run_manifest(ex.out, manifest);
      out << "extracted " << maps.size() << " feature maps to " << ex.out << "\n";
    };
  });

  // discover
  auto* discover = app.add_subcommand("discover", "Cluster patch features into a sub-concept dictionary");
  struct {
    std::string features, out;
    std::size_t M = 5, K = 256;
    std::uint64_t seed = 0;
  } di;
  discover->add_option("--features", di.features, "Feature directory")->required();
  discover->add_option("--M", di.M, "Number of foreground parts")->capture_default_str();
  discover->add_option("--K", di.K, "Splits per channel")->capture_default_str();
  discover->add_option("--seed", di.seed, "Clustering seed")->capture_default_str();
  discover->add_option("--out", di.out, "Dictionary directory")->required();
  discover->callback([&] {
    action = [&] {
      const Corpus c = load_corpus(di.features);
      const SubConceptDictionary dict = fit_hierarchy(c.maps, di.M, di.K, di.seed, {}, c.features.dataset_name);
      fs::create_directories(di.out);
      save_dictionary(di.out, dict);
      manifest.seeds = {{"kmeans", di.seed}};
      manifest.config = {{"M", di.M}, {"K", di.K}};
      manifest.inputs.push_back(input_digest(di.features));
      link_parent(manifest, di.features);
      write_run_manifest(di.out, manifest);
      out << "dictionary M=" << di.M << " K=" << di.K << " checksum " << dictionary_checksum(fs::path(di.out)) << "\n";
    };
  });

  // train
  auto* trainc = app.add_subcommand("train", "Learn sub-concept tokens, projector and LoRA adapters");
  struct {
    std::string features, images, dict, backend, config, out, preset, attn_loss;
    std::optional<std::size_t> steps, batch;
    std::optional<double> lambda, lr;
    std::optional<std::uint64_t> seed;
    bool no_projector = false, resume = false;
  } tr;
  trainc->add_option("--features", tr.features, "Feature directory")->required();
  trainc->add_option("--images", tr.images, "Image directory (default: FEATURES/images)");
  trainc->add_option("--dict", tr.dict, "Dictionary directory")->required();
  trainc->add_option("--backend", tr.backend, "toy or remote:URL (default: $PARTSMITH_BACKEND_URL, else toy)");
  trainc->add_option("--config", tr.config, "JSON training config; flags override its keys");
  trainc->add_option("--preset", tr.preset, "Start from a named config (toy)")->check(CLI::IsMember({"toy"}));
  trainc->add_option("--out", tr.out, "Run directory")->required();
  trainc->add_option("--steps", tr.steps, "Stop after this many optimizer steps");
  trainc->add_option("--batch-size", tr.batch, "Samples per micro-batch");
  trainc->add_option("--lambda", tr.lambda, "Attention loss weight");
  trainc->add_option("--lr", tr.lr, "Learning rate");
  trainc->add_option("--seed", tr.seed, "Training seed");
  trainc->add_option("--attn-loss", tr.attn_loss, "entropy or mse (ablation)")->check(CLI::IsMember({"entropy", "mse"}));
  trainc->add_flag("--no-projector", tr.no_projector, "Use raw token rows without the projector");
  trainc->add_flag("--resume", tr.resume, "Continue from the run directory's latest checkpoint");
  trainc->callback([&] {
    action = [&] {
      TrainConfig cfg = tr.preset == "toy" ? toy_train_config() : TrainConfig{};
      if (!tr.config.empty()) {
        const nlohmann::json j = read_json_file(tr.config);
        try {
          from_json(j, cfg);
        } catch (const nlohmann::json::exception& e) {
          fail(ErrorKind::validation, "bad training config: " + std::string(e.what()));
        }
        manifest.inputs.push_back(input_digest(tr.config));
      }
      if (tr.steps) cfg.max_steps = *tr.steps;
      if (tr.batch) cfg.batch_size = *tr.batch;
      if (tr.lambda) cfg.lambda_attn = *tr.lambda;
      if (tr.lr) cfg.lr = *tr.lr;
      if (tr.seed) cfg.seed = *tr.seed;
      if (!tr.attn_loss.empty()) cfg.attn_loss = tr.attn_loss == "mse" ? AttnLossKind::mse : AttnLossKind::entropy;
      if (tr.no_projector) cfg.use_projector = false;
      validate(cfg);

      const auto remote = open_backend(resolve_backend_spec(tr.backend));
      if (remote) require_trainable(*remote, cfg);  // refuses: no gradients through a remote backend

      const Corpus c = load_corpus(tr.features);
      const SubConceptDictionary dict = load_dictionary(tr.dict);
      const fs::path image_dir = tr.images.empty() ? fs::path(tr.features) / kImagesDir : fs::path(tr.images);
      const auto images = load_images(image_dir, c.ids);
      const auto samples = make_samples(c.ids, images, c.maps, dict, cfg.backend);

      TrainOptions opts;
      opts.out_dir = tr.out;
      opts.info = {fs::absolute(tr.dict).lexically_normal(), dictionary_checksum(fs::path(tr.dict))};
      opts.on_log = [&out](const LogEntry& e) {
        out << "step " << e.step << " l_ldm " << e.loss.l_ldm << " l_attn " << e.loss.l_attn << " l_total "
            << e.loss.l_total << " ema " << e.loss_ema << "\n";
      };
      CreatureModel model;
      TrainState state;
      if (tr.resume) {
        LoadedCheckpoint ck = load_checkpoint(resolve_checkpoint(tr.out));
        require(ck.info.dictionary_checksum == opts.info.dictionary_checksum, ErrorKind::validation,
                "checkpoint was trained against a different dictionary");
        model = std::move(ck.model);
        state = std::move(ck.state);
        // Only the schedule length may change on resume.
        model.config.max_steps = cfg.max_steps;
        model.config.epochs = cfg.epochs;
      } else {
        model = CreatureModel::create(cfg, dict.M, dict.K);
        state = initial_state(cfg);
      }
      fs::create_directories(tr.out);
      state = train(model, samples, std::move(state), opts);
      manifest.seeds = {{"train", model.config.seed}};
      manifest.config = model.config;
      manifest.inputs.push_back(input_digest(tr.features));
      manifest.inputs.push_back(input_digest(tr.dict));
      link_parent(manifest, tr.features);
      link_parent(manifest, tr.dict);
      write_run_manifest(tr.out, manifest);
      out << "trained " << state.step << " steps; checkpoint " << resolve_checkpoint(tr.out).string() << "\n";
    };
  });

  // compose
  auto* composec = app.add_subcommand("compose", "Build a hybrid code from tagged images, or a composition suite");
  struct {
    std::string features, dict, base, out;
    std::vector<std::string> donors;
    bool suite = false;
    std::size_t n = 500, pool = 0;
    std::string sources = "1,2,3,4";
    std::uint64_t seed = 0;
  } co;
  composec->add_option("--features", co.features, "Feature directory of the tagged corpus")->required();
  composec->add_option("--dict", co.dict, "Dictionary directory")->required();
  composec->add_option("--base", co.base, "Base image id");
  composec->add_option("--donor", co.donors, "Donor as IMAGE_ID:CHANNEL (repeatable)");
  composec->add_flag("--suite", co.suite, "Sample a composition suite instead");
  composec->add_option("--n", co.n, "Suite size")->capture_default_str();
  composec->add_option("--pool", co.pool, "Pool size (default: half the corpus, at most 500)");
  composec->add_option("--sources", co.sources, "Allowed source counts, cycled")->capture_default_str();
  composec->add_option("--seed", co.seed, "Suite seed")->capture_default_str();
  composec->add_option("--out", co.out, "Output JSON file")->required();
  composec->callback([&] {
    action = [&] {
      const Corpus c = load_corpus(co.features);
      const SubConceptDictionary dict = load_dictionary(co.dict);
      const auto tagged = tag_corpus(c, dict);
      nlohmann::json result;
      if (co.suite) {
        SuiteOptions so;
        so.n = co.n;
        so.n_pool = co.pool > 0 ? co.pool : std::min<std::size_t>(500, tagged.size() / 2);
        so.seed = co.seed;
        so.sources_per_item.clear();
        for (double s : parse_doubles(co.sources)) so.sources_per_item.push_back(static_cast<std::size_t>(s));
        result = suite_to_json(sample_composition_suite(tagged, so));
        manifest.seeds = {{"suite", co.seed}};
        manifest.config = {{"n", so.n}, {"n_pool", so.n_pool}, {"sources_per_item", so.sources_per_item}};
      } else {
        auto find = [&](const std::string& id) -> const PromptCode& {
          for (const auto& t : tagged)
            if (t.image_id == id) return t.code;
          fail(ErrorKind::validation, "unknown image id " + id);
        };
        require(!co.base.empty(), ErrorKind::validation, "compose needs --base (or --suite)");
        std::vector<Donor> donors;
        for (const auto& d : co.donors) {
          const auto colon = d.rfind(':');
          require(colon != std::string::npos, ErrorKind::validation, "donor must be IMAGE_ID:CHANNEL, got " + d);
          std::size_t ch = 0;
          try {
            ch = std::stoul(d.substr(colon + 1));
          } catch (const std::exception&) {
            fail(ErrorKind::validation, "donor channel is not a number in " + d);
          }
          donors.push_back({find(d.substr(0, colon)), ch});
        }
        result = code_to_json(compose(find(co.base), donors));
        manifest.config = {{"base", co.base}, {"donors", co.donors}};
      }
      write_json_file(co.out, result);
      manifest.inputs.push_back(input_digest(co.features));
      manifest.inputs.push_back(input_digest(co.dict));
      link_parent(manifest, co.dict);
      write_file_manifest(co.out, manifest);
      out << "wrote " << co.out << "\n";
    };
  });

  // generate
  auto* gen = app.add_subcommand("generate", "Sample an image for a prompt code");
  struct {
    std::string code, ckpt, out, style, backend;
    std::uint64_t seed = 0;
    std::size_t steps = 50;
  } ge;
  gen->add_option("--code", ge.code, "Code JSON file")->required();
  gen->add_option("--ckpt", ge.ckpt, "Checkpoint or run directory");
  gen->add_option("--seed", ge.seed, "Sampler seed")->capture_default_str();
  gen->add_option("--steps", ge.steps, "Sampler steps")->capture_default_str();
  gen->add_option("--style", ge.style, "Free-text style suffix");
  gen->add_option("--backend", ge.backend, "toy or remote:URL");
  gen->add_option("--out", ge.out, "Output directory")->required();
  gen->callback([&] {
    action = [&] {
      const fs::path ck = resolve_checkpoint(ge.ckpt);
      LoadedCheckpoint loaded = load_checkpoint(ck);
      const PromptCode code = code_from_json(read_json_file(ge.code));
      const auto remote = open_backend(resolve_backend_spec(ge.backend));
      const GenerationResult g = generate(loaded.model, code, {ge.steps, ge.seed, ge.style}, remote.get());
      fs::create_directories(ge.out);
      psfm::write_file_bytes(fs::path(ge.out) / "image.png", encode_png(g.image));
      write_json_file(fs::path(ge.out) / "generation.json",
                      {{"code", code_to_json(code)}, {"prompt", g.prompt}, {"seed", ge.seed}, {"steps", ge.steps},
                       {"style_suffix", ge.style}});
      manifest.seeds = {{"sampler", ge.seed}};
      manifest.config = {{"steps", ge.steps}, {"style_suffix", ge.style}, {"backend", resolve_backend_spec(ge.backend)}};
      manifest.inputs.push_back(input_digest(ge.code));
      manifest.inputs.push_back(input_digest(ck));
      link_parent(manifest, ge.ckpt);
      write_run_manifest(ge.out, manifest);
      out << "wrote " << (fs::path(ge.out) / "image.png").string() << "\n";
    };
  });

  // eval
  auto* evalc = app.add_subcommand("eval", "Score a composition suite with EMR and CoSim");
  struct {
    std::string suite, ckpt, dict, report, backend;
    std::uint64_t seed = 0;
    std::size_t steps = 50;
  } ev;
  evalc->add_option("--suite", ev.suite, "Suite JSON");
  evalc->add_option("--ckpt", ev.ckpt, "Checkpoint or run directory");
  evalc->add_option("--dict", ev.dict, "Dictionary directory (default: the checkpoint's)");
  evalc->add_option("--report", ev.report, "Report JSON file");
  evalc->add_option("--seed", ev.seed, "Base sampler seed")->capture_default_str();
  evalc->add_option("--steps", ev.steps, "Sampler steps")->capture_default_str();
  evalc->add_option("--backend", ev.backend, "toy or remote:URL");
  evalc->callback([&] {
    action = [&] {
      const fs::path ck = resolve_checkpoint(ev.ckpt);
      require(!ev.suite.empty(), ErrorKind::validation, "eval needs --suite");
      require(!ev.report.empty(), ErrorKind::validation, "eval needs --report");
      LoadedCheckpoint loaded = load_checkpoint(ck);
      const fs::path dict_dir = ev.dict.empty() ? loaded.info.dictionary_dir : fs::path(ev.dict);
      const SubConceptDictionary dict = load_dictionary(dict_dir);
      require(dictionary_checksum(dict_dir) == loaded.info.dictionary_checksum, ErrorKind::validation,
              "dictionary checksum differs from the one the checkpoint was trained on");
      const auto suite = suite_from_json(read_json_file(ev.suite));
      const auto remote = open_backend(resolve_backend_spec(ev.backend));
      const StubExtractor extractor;
      const SuiteReport rep = eval_suite(suite, loaded.model, dict, extractor, {ev.steps, ev.seed, {}}, remote.get(),
                                         toy::kPatch);
      write_json_file(ev.report, to_json(rep));
      manifest.seeds = {{"sampler", ev.seed}};
      manifest.config = {{"steps", ev.steps}};
      manifest.inputs.push_back(input_digest(ev.suite));
      manifest.inputs.push_back(input_digest(ck));
      link_parent(manifest, ev.ckpt);
      link_parent(manifest, ev.suite);
      write_file_manifest(ev.report, manifest);
      out << "emr " << rep.overall.emr << " cosim " << rep.overall.cosim << " (" << rep.overall.n_samples
          << " items, " << rep.failed << " failed)\n";
    };
  });

  // sweep
  auto* sweepc = app.add_subcommand("sweep", "Lambda sweep on the toy task");
  struct {
    std::string lambdas = "0.1,0.01,0.001,0.0001,0.00001", seeds = "0", out;
    std::optional<std::size_t> steps;
    std::size_t suite = 50;
    bool no_projector = false;
  } sw;
  sweepc->add_option("--lambdas", sw.lambdas, "Comma-separated lambda values")->capture_default_str();
  sweepc->add_option("--seeds", sw.seeds, "Comma-separated training seeds")->capture_default_str();
  sweepc->add_option("--steps", sw.steps, "Optimizer steps per run");
  sweepc->add_option("--suite-size", sw.suite, "Composition suite size")->capture_default_str();
  sweepc->add_flag("--no-projector", sw.no_projector, "Ablate the projector");
  sweepc->add_option("--out", sw.out, "Output directory")->required();
  sweepc->callback([&] {
    action = [&] {
      ToyTaskConfig tc;
      if (sw.steps) tc.train.max_steps = *sw.steps;
      tc.suite_size = sw.suite;
      tc.train.use_projector = !sw.no_projector;
      const ToyTask task = make_toy_task(tc);
      const auto lambdas = parse_doubles(sw.lambdas);
      const auto seeds = parse_seeds(sw.seeds);
      std::vector<SweepRow> rows;
      for (double lambda : lambdas) {
        SweepRow row{lambda, 0.0, 0.0, 0.0, seeds.size()};
        for (std::uint64_t seed : seeds) {
          const ToyRun r = run_toy(task, lambda, seed, true, !sw.no_projector);
          row.emr += r.composition.overall.emr / static_cast<double>(seeds.size());
          row.cosim += r.composition.overall.cosim / static_cast<double>(seeds.size());
          row.attention_iou += r.attention_iou / static_cast<double>(seeds.size());
        }
        out << "lambda " << lambda << " emr " << row.emr << " cosim " << row.cosim << " iou " << row.attention_iou
            << "\n";
        rows.push_back(row);
      }
      nlohmann::json j = sweep_to_json(rows);
      j["use_projector"] = !sw.no_projector;
      write_json_file(fs::path(sw.out) / "sweep.json", j);
      manifest.seeds = {{"train", seeds}};
      manifest.config = {{"lambdas", lambdas}, {"train", tc.train}, {"suite_size", sw.suite}};
      write_run_manifest(sw.out, manifest);
    };
  });

  // dump-attn
  auto* dump = app.add_subcommand("dump-attn", "Write per-channel cross-attention maps for a code");
  struct {
    std::string ckpt, code, out, backend;
    std::uint64_t seed = 0;
    std::size_t steps = 50;
  } du;
  dump->add_option("--ckpt", du.ckpt, "Checkpoint or run directory");
  dump->add_option("--code", du.code, "Code JSON file")->required();
  dump->add_option("--seed", du.seed, "Sampler seed")->capture_default_str();
  dump->add_option("--steps", du.steps, "Sampler steps")->capture_default_str();
  dump->add_option("--backend", du.backend, "toy or remote:URL");
  dump->add_option("--out", du.out, "Output directory")->required();
  dump->callback([&] {
    action = [&] {
      const fs::path ck = resolve_checkpoint(du.ckpt);
      LoadedCheckpoint loaded = load_checkpoint(ck);
      const PromptCode code = code_from_json(read_json_file(du.code));
      const auto remote = open_backend(resolve_backend_spec(du.backend));
      const AttentionDump d = dump_attention(loaded.model, code, du.out, {du.steps, du.seed, {}}, remote.get());
      manifest.seeds = {{"sampler", du.seed}};
      manifest.config = {{"steps", du.steps}};
      manifest.inputs.push_back(input_digest(du.code));
      manifest.inputs.push_back(input_digest(ck));
      link_parent(manifest, du.ckpt);
      write_run_manifest(du.out, manifest);
      out << "wrote attention maps to " << du.out << "\n";
      (void)d;
    };
  });

  // serve
  auto* serve = app.add_subcommand("serve", "Run the mixer HTTP service");
  struct {
    std::string ckpt, dict, backend, host = "127.0.0.1";
    int port = 8080;
    std::size_t concurrency = 2, steps = 50;
  } se;
  serve->add_option("--ckpt", se.ckpt, "Checkpoint or run directory");
  serve->add_option("--dict", se.dict, "Dictionary directory (default: the checkpoint's)");
  serve->add_option("--backend", se.backend, "toy or remote:URL");
  serve->add_option("--host", se.host, "Bind address")->capture_default_str();
  serve->add_option("--port", se.port, "Port")->capture_default_str();
  serve->add_option("--concurrency", se.concurrency, "Concurrent generation jobs")->capture_default_str();
  serve->add_option("--steps", se.steps, "Sampler steps")->capture_default_str();
  serve->callback([&] {
    action = [&] {
      LoadedCheckpoint loaded = load_checkpoint(resolve_checkpoint(se.ckpt));
      const fs::path dict_dir = se.dict.empty() ? loaded.info.dictionary_dir : fs::path(se.dict);
      SubConceptDictionary dict = load_dictionary(dict_dir);
      const std::string checksum = dictionary_checksum(dict_dir);
      require(checksum == loaded.info.dictionary_checksum, ErrorKind::validation,
              "dictionary checksum differs from the one the checkpoint was trained on");
      const auto remote = open_backend(resolve_backend_spec(se.backend));
      service::ServiceOptions so;
      so.concurrency = se.concurrency;
      so.sampler_steps = se.steps;
      service::MixerService svc(std::move(loaded.model), std::move(dict), checksum, remote.get(), so);
      httplib::Server server;
      svc.mount(server);
      g_server = &server;
      std::signal(SIGINT, stop_server);
      std::signal(SIGTERM, stop_server);
      out << "serving on http://" << se.host << ":" << se.port << "\n" << std::flush;
      const bool ok = server.listen(se.host, se.port);
      g_server = nullptr;
      require(ok, ErrorKind::io, "could not listen on " + se.host + ":" + std::to_string(se.port));
    };
  });

  std::vector<const char*> cargv = {"partsmith"};
  for (const auto& a : argv) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  }
  manifest.command = app.get_subcommands().front()->get_name();
  try {
    if (action) action();
    return 0;
  } catch (const Error& e) {
    err << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace partsmith::cli
