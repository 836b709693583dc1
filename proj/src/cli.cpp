#include "find3d/cli.hpp"

#include "find3d/io.hpp"
#include "find3d/ply.hpp"
#include "find3d/rng.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include <array>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <ostream>
#include <stdexcept>

namespace find3d::cli {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

fs::path with_suffix(const fs::path& base, const std::string& suffix) { return fs::path(base.string() + suffix); }

std::string env_or_throw(const char* name, const std::string& what) {
  const char* v = std::getenv(name);
  if (!v || !*v) throw std::runtime_error(what + " requires " + name);
  return v;
}

}  // namespace

std::unique_ptr<query::TextEmbedder> make_embedder(const EmbedderOptions& options, int dim) {
  return query::make_embedder(options.kind, dim, options.seed, options.cache);
}

// ---------------------------------------------------------------------------

void cmd_synth(const SynthOptions& options, std::ostream& log) {
  if (options.out_dir.empty()) throw std::invalid_argument("synth: an output directory is required");
  const auto all = bench::synth_dataset(options.synth);
  io::write_manifest(options.out_dir, "synthetic", all);
  const auto split = bench::split_by_object(all, options.test_fraction, derive_seed(options.synth.seed, 0x5e1));
  io::write_manifest(options.out_dir, "synthetic-train", split.train, "train.json");
  io::write_manifest(options.out_dir, "synthetic-test", split.test, "test.json");
  log << "wrote " << all.size() << " objects (" << split.train.size() << " train, " << split.test.size()
      << " test) to " << options.out_dir.string() << '\n';
}

void cmd_annotate(const AnnotateOptions& options, std::ostream& log) {
  const auto manifest = io::read_manifest(options.manifest);
  auto embedder = make_embedder(options.embedder, options.dim);
  std::unique_ptr<engine::AnnotationProvider> remote;
  if (options.provider == "remote") {
    remote = std::make_unique<engine::RemoteProvider>(env_or_throw("FIND3D_ANNOTATOR_URL", "the remote provider"));
  } else if (options.provider != "oracle") {
    throw std::invalid_argument("unknown provider '" + options.provider + "' (expected oracle or remote)");
  }

  std::vector<train::LabelRecord> records;
  std::size_t flagged = 0;
  for (const auto& o : manifest.objects) {
    std::unique_ptr<engine::AnnotationProvider> oracle;
    if (!remote) oracle = std::make_unique<engine::OracleProvider>(o.cloud, o.gt, o.part_names);
    auto result = engine::build_labels(o.id, o.cloud, remote ? *remote : *oracle, *embedder, options.label);
    log << o.id << ": " << result.records.size() << " labels";
    if (result.insufficient) {
      ++flagged;
      log << " (insufficient, skipped)\n";
      continue;
    }
    log << '\n';
    for (auto& r : result.records) records.push_back(std::move(r));
  }
  io::write_annotations(options.out, records);
  log << "wrote " << records.size() << " labels for " << manifest.objects.size() - flagged << " objects to "
      << options.out.string() << '\n';
}

// ---------------------------------------------------------------------------

TrainPlan resolve_train_plan(const TrainOptions& options) {
  TrainPlan plan;
  if (options.preset == "toy") {
    plan.train = train::TrainConfig::toy();
  } else if (options.preset == "paper") {
    plan.model = net::ModelConfig::paper_scale();
  } else {
    throw std::invalid_argument("unknown preset '" + options.preset + "' (expected toy or paper)");
  }
  if (!options.config.empty()) {
    const std::string text = io::read_file(options.config);
    try {
      const json j = json::parse(text);
      if (auto it = j.find("model"); it != j.end()) {
        json model = json::parse(io::model_config_to_json(plan.model));
        model.merge_patch(*it);
        plan.model = io::model_config_from_json(model.dump());
      }
      plan.train = io::train_config_from_json(text, plan.train);
    } catch (const std::exception& e) {
      throw std::runtime_error(options.config.string() + ": " + e.what());
    }
  }
  if (options.seed) plan.train.seed = *options.seed;
  if (options.epochs) plan.train.epochs = *options.epochs;
  plan.model.validate();
  plan.train.validate();
  return plan;
}

void cmd_train(const TrainOptions& options, std::ostream& log) {
  if (options.out.empty()) throw std::invalid_argument("train: an output checkpoint path is required");
  const TrainPlan plan = resolve_train_plan(options);
  const auto manifest = io::read_manifest(options.manifest);
  auto labels = io::read_annotations(options.annotations);

  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < manifest.objects.size(); ++k) index.emplace(manifest.objects[k].id, k);
  std::vector<std::vector<train::LabelRecord>> grouped(manifest.objects.size());
  for (auto& r : labels) {
    auto it = index.find(r.object_id);
    if (it == index.end()) {
      throw std::runtime_error(options.annotations.string() + ": label for unknown object '" + r.object_id + "'");
    }
    if (r.embedding.size() != plan.model.out_dim) {
      throw std::runtime_error(options.annotations.string() + ": embedding dimension " +
                               std::to_string(r.embedding.size()) + " does not match model output dimension " +
                               std::to_string(plan.model.out_dim));
    }
    grouped[it->second].push_back(std::move(r));
  }
  std::vector<train::TrainingObject> dataset;
  for (std::size_t k = 0; k < manifest.objects.size(); ++k) {
    if (grouped[k].empty()) continue;
    const auto& o = manifest.objects[k];
    dataset.push_back({o.id, normalize(o.cloud).first, std::move(grouped[k])});
  }
  if (dataset.empty()) throw std::runtime_error("train: no labeled objects");

  log << "training on " << dataset.size() << " objects, " << net::init_model(plan.model).parameter_count()
      << " parameters, " << plan.train.epochs << " epochs\n";
  const auto result = train::fit(dataset, plan.train, net::init_model(plan.model), [&](const train::EpochStats& s) {
    log << "epoch " << s.epoch << " lr " << std::setprecision(4) << s.lr << " train " << s.train_loss << " val "
        << s.val_loss << '\n';
  });
  io::save_checkpoint(options.out, result.best);
  if (!options.last.empty()) io::save_checkpoint(options.last, result.last);
  const fs::path history = options.history.empty() ? with_suffix(options.out, ".history.csv") : options.history;
  io::write_file(history, train::history_csv(result.history));
  log << "wrote " << options.out.string() << " and " << history.string() << '\n';
}

// ---------------------------------------------------------------------------

Vec3 assignment_color(std::int32_t assignment) {
  static constexpr std::array<std::array<double, 3>, 9> kPalette{{{0.122, 0.467, 0.706},
                                                                  {1.000, 0.498, 0.055},
                                                                  {0.173, 0.627, 0.173},
                                                                  {0.839, 0.153, 0.157},
                                                                  {0.580, 0.404, 0.741},
                                                                  {0.549, 0.337, 0.294},
                                                                  {0.890, 0.467, 0.761},
                                                                  {0.737, 0.741, 0.133},
                                                                  {0.090, 0.745, 0.812}}};
  if (assignment < 0) return {0.7, 0.7, 0.7};
  const auto& c = kPalette[static_cast<std::size_t>(assignment) % kPalette.size()];
  return {c[0], c[1], c[2]};
}

void cmd_segment(const SegmentOptions& options, std::ostream& log) {
  if (options.queries.empty()) throw std::invalid_argument("segment: at least one query is required");
  if (options.out.empty()) throw std::invalid_argument("segment: an output prefix is required");
  const auto state = io::load_checkpoint(options.checkpoint);
  PointCloud cloud = read_ply(options.cloud);
  auto embedder = make_embedder(options.embedder, state.config.out_dim);
  const auto result = query::segment(cloud, state, options.queries, *embedder);

  io::write_file(with_suffix(options.out, ".json"), query::to_json(result));
  std::vector<std::size_t> counts(options.queries.size() + 1, 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto a = result.assignment[i];
    cloud.points[i].color = assignment_color(a);
    ++counts[a < 0 ? options.queries.size() : static_cast<std::size_t>(a)];
  }
  write_ply(with_suffix(options.out, ".ply"), cloud);
  for (std::size_t q = 0; q < options.queries.size(); ++q) log << options.queries[q] << ": " << counts[q] << " points\n";
  log << "no label: " << counts.back() << " points\n";
}

bench::EvalReport cmd_eval(const EvalOptions& options, std::ostream& log) {
  const auto manifest = io::read_manifest(options.manifest);
  bench::EvalReport report;
  if (options.predictor == "random") {
    report = bench::random_baseline(manifest.objects, options.eval.seed);
  } else {
    std::optional<net::ModelState> state;
    int dim = options.dim;
    if (options.predictor == "model") {
      if (options.checkpoint.empty()) throw std::invalid_argument("eval: the model predictor needs --checkpoint");
      state = io::load_checkpoint(options.checkpoint);
      dim = state->config.out_dim;
    } else if (options.predictor != "oracle") {
      throw std::invalid_argument("unknown predictor '" + options.predictor + "' (expected model, oracle or random)");
    }
    auto embedder = make_embedder(options.embedder, dim);
    const auto features =
        state ? bench::model_features(*state) : bench::oracle_features(*embedder, options.eval.prompt_template);
    report = bench::evaluate(features, manifest.objects, options.eval, *embedder);
    report.model = state ? options.checkpoint.filename().string() : "oracle";
  }

  if (!options.out.empty()) {
    io::write_file(with_suffix(options.out, ".json"), bench::report_json(report));
    io::write_file(with_suffix(options.out, ".csv"), bench::report_csv(report));
  }
  log << std::fixed << std::setprecision(4);
  for (const auto& [category, miou] : report.per_category) log << category << ": " << miou << '\n';
  log << "class mIoU: " << report.overall << '\n';
  log.unsetf(std::ios::floatfield);
  return report;
}

// ---------------------------------------------------------------------------

Service::Service(net::ModelState state, std::vector<bench::BenchmarkObject> objects,
                 std::unique_ptr<query::TextEmbedder> embedder)
    : state_(std::move(state)), objects_(std::move(objects)), embedder_(std::move(embedder)) {
  if (embedder_->dim() != state_.config.out_dim) {
    throw std::invalid_argument("embedder dimension does not match the model output dimension");
  }
  features_.reserve(objects_.size());
  for (const auto& o : objects_) features_.push_back(query::point_features(o.cloud, state_));
}

const bench::BenchmarkObject& Service::object(const std::string& id) const {
  for (const auto& o : objects_)
    if (o.id == id) return o;
  throw std::out_of_range("unknown object '" + id + "'");
}

std::string Service::objects_json() const {
  ojson out = ojson::array();
  for (const auto& o : objects_) out.push_back({{"id", o.id}, {"category", o.category}, {"n_points", o.cloud.size()}});
  return out.dump();
}

std::string Service::points_json(const std::string& id) const {
  const auto& o = object(id);
  ojson positions = ojson::array(), colors = ojson::array();
  for (const auto& p : o.cloud.points) {
    positions.push_back({static_cast<float>(p.position.x()), static_cast<float>(p.position.y()),
                         static_cast<float>(p.position.z())});
    colors.push_back({static_cast<float>(p.color.x()), static_cast<float>(p.color.y()), static_cast<float>(p.color.z())});
  }
  ojson out;
  out["positions"] = std::move(positions);
  out["colors"] = std::move(colors);
  return out.dump();
}

std::string Service::query_json(const std::string& id, const std::vector<std::string>& queries) const {
  const auto& o = object(id);
  const auto k = static_cast<std::size_t>(&o - objects_.data());
  return query::to_json(query::query_features(features_[k], queries, *embedder_));
}

namespace {

void send_error(httplib::Response& res, int status, const std::string& error, const std::string& detail) {
  res.status = status;
  res.set_content(ojson{{"error", error}, {"detail", detail}}.dump(), "application/json");
}

}  // namespace

void Service::mount(httplib::Server& server) const {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
  server.Get("/objects", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(objects_json(), "application/json");
  });
  server.Get(R"(/objects/([^/]+)/points)", [this](const httplib::Request& req, httplib::Response& res) {
    try {
      res.set_content(points_json(req.matches[1]), "application/json");
    } catch (const std::out_of_range& e) {
      send_error(res, 404, "not_found", e.what());
    }
  });
  server.Post(R"(/objects/([^/]+)/query)", [this](const httplib::Request& req, httplib::Response& res) {
    std::vector<std::string> queries;
    try {
      const json body = json::parse(req.body);
      queries = body.at("queries").get<std::vector<std::string>>();
    } catch (const std::exception& e) {
      send_error(res, 400, "bad_request", std::string("expected {\"queries\": [string, ...]}: ") + e.what());
      return;
    }
    if (queries.empty()) {
      send_error(res, 400, "bad_request", "queries must not be empty");
      return;
    }
    try {
      res.set_content(query_json(req.matches[1], queries), "application/json");
    } catch (const std::out_of_range& e) {
      send_error(res, 404, "not_found", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  });
  server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (res.body.empty()) send_error(res, res.status, "http_" + std::to_string(res.status), req.method + " " + req.path);
  });
}

std::unique_ptr<Service> load_service(const ServeOptions& options) {
  auto state = io::load_checkpoint(options.checkpoint);
  auto manifest = io::read_manifest(options.manifest);
  auto embedder = make_embedder(options.embedder, state.config.out_dim);
  return std::make_unique<Service>(std::move(state), std::move(manifest.objects), std::move(embedder));
}

void cmd_serve(const ServeOptions& options, std::ostream& log) {
  const auto service = load_service(options);
  httplib::Server server;
  service->mount(server);
  if (!options.static_dir.empty() && !server.set_mount_point("/", options.static_dir.string())) {
    throw std::runtime_error("cannot serve static files from " + options.static_dir.string());
  }
  log << "listening on http://" << options.host << ':' << options.port << std::endl;
  if (!server.listen(options.host, options.port)) {
    throw std::runtime_error("cannot listen on " + options.host + ":" + std::to_string(options.port));
  }
}

// ---------------------------------------------------------------------------

namespace {

void add_embedder_options(CLI::App* cmd, EmbedderOptions& e) {
  cmd->add_option("--embedder", e.kind, "Text embedder: mock, cache or remote (FIND3D_EMBEDDER_URL)")
      ->capture_default_str()
      ->check(CLI::IsMember({"mock", "cache", "remote"}));
  cmd->add_option("--embedder-seed", e.seed, "Seed of the mock embedder")->capture_default_str();
  cmd->add_option("--embedder-cache", e.cache, "JSON-lines embedding cache for --embedder cache");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Open-vocabulary part segmentation of point clouds", "find3d"};
  app.require_subcommand(1);

  SynthOptions synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic multi-part dataset");
  c_synth->add_option("--out", synth.out_dir, "Output directory")->required();
  c_synth->add_option("--objects", synth.synth.n_objects, "Number of objects")->capture_default_str();
  c_synth->add_option("--min-parts", synth.synth.min_parts, "Fewest parts per object")->capture_default_str();
  c_synth->add_option("--max-parts", synth.synth.max_parts, "Most parts per object")->capture_default_str();
  c_synth->add_option("--points-per-part", synth.synth.points_per_part, "Surface samples per part")->capture_default_str();
  c_synth->add_option("--seed", synth.synth.seed, "Generator and split seed")->capture_default_str();
  c_synth->add_option("--test-fraction", synth.test_fraction, "Share of objects in test.json")->capture_default_str();

  AnnotateOptions annotate;
  auto* c_annotate = app.add_subcommand("annotate", "Run the data engine and write training labels");
  c_annotate->add_option("--manifest", annotate.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  c_annotate->add_option("--out", annotate.out, "Output JSON-lines file (embeddings go to <out>.fnde)")->required();
  c_annotate->add_option("--provider", annotate.provider, "oracle (ground truth) or remote (FIND3D_ANNOTATOR_URL)")
      ->capture_default_str()
      ->check(CLI::IsMember({"oracle", "remote"}));
  c_annotate->add_option("--dim", annotate.dim, "Embedding width (toy model output)")->capture_default_str();
  c_annotate->add_option("--views", annotate.label.render.n_views, "Renders per object")->capture_default_str();
  c_annotate->add_option("--min-labels", annotate.label.min_labels, "Objects with fewer labels are dropped")
      ->capture_default_str();
  c_annotate->add_option("--min-confidence", annotate.label.filter.min_confidence, "Mask confidence threshold")
      ->capture_default_str();
  add_embedder_options(c_annotate, annotate.embedder);

  TrainOptions trainopt;
  auto* c_train = app.add_subcommand("train", "Train the point transformer on annotations");
  c_train->add_option("--manifest", trainopt.manifest, "Dataset manifest holding the clouds")
      ->required()
      ->check(CLI::ExistingFile);
  c_train->add_option("--annotations", trainopt.annotations, "Labels written by annotate")->required();
  c_train->add_option("--out", trainopt.out, "Checkpoint of the best validation epoch")->required();
  c_train->add_option("--config", trainopt.config, "JSON overrides: train keys plus an optional \"model\" object");
  c_train->add_option("--preset", trainopt.preset,
                      "toy (batch 8, 30 epochs, lr 3e-3..5e-4) or paper (batch 64, 80 epochs, lr 3e-4..5e-5)")
      ->capture_default_str()
      ->check(CLI::IsMember({"toy", "paper"}));
  c_train->add_option("--seed", trainopt.seed, "Training seed (split, shuffling, augmentation)");
  c_train->add_option("--epochs", trainopt.epochs, "Override the epoch count");
  c_train->add_option("--last", trainopt.last, "Also save the final epoch here");
  c_train->add_option("--history", trainopt.history, "Loss history CSV (default <out>.history.csv)");

  SegmentOptions seg;
  auto* c_segment = app.add_subcommand("segment", "Segment one cloud with free-form text queries");
  c_segment->add_option("--checkpoint", seg.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  c_segment->add_option("--cloud", seg.cloud, "Input PLY")->required()->check(CLI::ExistingFile);
  c_segment->add_option("--query,-q", seg.queries, "Part query (repeatable)")->required();
  c_segment->add_option("--out", seg.out, "Output prefix: <out>.json and <out>.ply")->required();
  add_embedder_options(c_segment, seg.embedder);

  EvalOptions evalopt;
  std::string rotation = "canonical";
  auto* c_eval = app.add_subcommand("eval", "Class-average mIoU on a benchmark manifest");
  c_eval->add_option("--manifest", evalopt.manifest, "Benchmark manifest")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--checkpoint", evalopt.checkpoint, "Model checkpoint (predictor model)");
  c_eval->add_option("--predictor", evalopt.predictor, "model, oracle (ground-truth embeddings) or random")
      ->capture_default_str()
      ->check(CLI::IsMember({"model", "oracle", "random"}));
  c_eval->add_option("--template", evalopt.eval.prompt_template, "Prompt template with {part} and {object}")
      ->capture_default_str();
  c_eval->add_option("--rotation", rotation, "canonical or rotated (three seeded angles per object)")
      ->capture_default_str()
      ->check(CLI::IsMember({"canonical", "rotated"}));
  c_eval->add_option("--seed", evalopt.eval.seed, "Rotation and baseline seed")->capture_default_str();
  c_eval->add_option("--dim", evalopt.dim, "Embedding width without a checkpoint")->capture_default_str();
  c_eval->add_option("--out", evalopt.out, "Output prefix: <out>.json and <out>.csv");
  add_embedder_options(c_eval, evalopt.embedder);

  ServeOptions serve;
  auto* c_serve = app.add_subcommand("serve", "HTTP query service for the viewer");
  c_serve->add_option("--checkpoint", serve.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  c_serve->add_option("--manifest", serve.manifest, "Objects to serve")->required()->check(CLI::ExistingFile);
  c_serve->add_option("--host", serve.host, "Bind address")->capture_default_str();
  c_serve->add_option("--port", serve.port, "Port")->capture_default_str();
  c_serve->add_option("--static", serve.static_dir, "Directory served at / (the built viewer)");
  add_embedder_options(c_serve, serve.embedder);

  fs::path describe_ckpt;
  std::string describe_preset = "toy";
  auto* c_describe = app.add_subcommand("describe", "Print a model's layer plan and parameter count");
  c_describe->add_option("--checkpoint", describe_ckpt, "Describe this checkpoint's model");
  c_describe->add_option("--preset", describe_preset, "toy or paper, when no checkpoint is given")
      ->capture_default_str()
      ->check(CLI::IsMember({"toy", "paper"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*c_synth) cmd_synth(synth, out);
    if (*c_annotate) cmd_annotate(annotate, out);
    if (*c_train) cmd_train(trainopt, out);
    if (*c_segment) cmd_segment(seg, out);
    if (*c_eval) {
      evalopt.eval.rotation = bench::parse_rotation_mode(rotation);
      cmd_eval(evalopt, out);
    }
    if (*c_serve) cmd_serve(serve, out);
    if (*c_describe) {
      const net::ModelConfig config = !describe_ckpt.empty()           ? io::load_checkpoint(describe_ckpt).config
                                      : describe_preset == "paper" ? net::ModelConfig::paper_scale()
                                                                   : net::ModelConfig{};
      out << net::describe(config);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"find3d"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace find3d::cli
