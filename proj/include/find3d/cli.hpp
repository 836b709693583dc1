#pragma once

// Subcommands of the find3d tool and the HTTP service behind the viewer.

#include "find3d/bench.hpp"
#include "find3d/engine.hpp"
#include "find3d/net.hpp"
#include "find3d/query.hpp"
#include "find3d/train.hpp"

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace find3d::cli {

namespace fs = std::filesystem;

struct EmbedderOptions {
  std::string kind = "mock";  // mock | cache | remote
  std::uint64_t seed = 0;     // mock only
  fs::path cache;             // cache only
};

std::unique_ptr<query::TextEmbedder> make_embedder(const EmbedderOptions& options, int dim);

struct SynthOptions {
  bench::SynthConfig synth;
  double test_fraction = 0.2;
  fs::path out_dir;
};

/// Writes manifest.json with every object plus train.json and test.json
/// holding a seeded split by object.
void cmd_synth(const SynthOptions& options, std::ostream& log);

struct AnnotateOptions {
  fs::path manifest;
  std::string provider = "oracle";  // oracle | remote
  EmbedderOptions embedder;
  int dim = 32;
  engine::LabelConfig label;
  fs::path out;
};

/// build_labels per object; objects with too few labels are reported and left
/// out of the output.
void cmd_annotate(const AnnotateOptions& options, std::ostream& log);

struct TrainOptions {
  fs::path manifest;
  fs::path annotations;
  fs::path config;           // optional JSON: train keys plus an optional "model" object
  std::string preset = "toy";  // toy | paper
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  fs::path out;
  fs::path last;     // optional checkpoint of the final epoch
  fs::path history;  // defaults to <out>.history.csv
};

struct TrainPlan {
  net::ModelConfig model;
  train::TrainConfig train;
};
TrainPlan resolve_train_plan(const TrainOptions& options);

void cmd_train(const TrainOptions& options, std::ostream& log);

struct SegmentOptions {
  fs::path checkpoint;
  fs::path cloud;
  std::vector<std::string> queries;
  EmbedderOptions embedder;
  fs::path out;  // writes <out>.json and <out>.ply
};

void cmd_segment(const SegmentOptions& options, std::ostream& log);

struct EvalOptions {
  fs::path checkpoint;              // required for the model predictor
  std::string predictor = "model";  // model | oracle | random
  fs::path manifest;
  bench::EvalConfig eval;
  EmbedderOptions embedder;
  int dim = 32;  // embedder width when there is no checkpoint
  fs::path out;  // writes <out>.json and <out>.csv
};

bench::EvalReport cmd_eval(const EvalOptions& options, std::ostream& log);

/// Per-assignment colors for segmentation output; kNoLabel is gray.
Vec3 assignment_color(std::int32_t assignment);

/// Immutable state shared by all request handlers.
class Service {
 public:
  Service(net::ModelState state, std::vector<bench::BenchmarkObject> objects,
          std::unique_ptr<query::TextEmbedder> embedder);

  /// Registers GET /objects, GET /objects/{id}/points and
  /// POST /objects/{id}/query.
  void mount(httplib::Server& server) const;

  std::string objects_json() const;
  /// Throws std::out_of_range for unknown ids.
  std::string points_json(const std::string& id) const;
  std::string query_json(const std::string& id, const std::vector<std::string>& queries) const;

 private:
  const bench::BenchmarkObject& object(const std::string& id) const;

  net::ModelState state_;
  std::vector<bench::BenchmarkObject> objects_;
  std::vector<MatrixF> features_;  // full-resolution, parallel to objects_
  std::unique_ptr<query::TextEmbedder> embedder_;
};

struct ServeOptions {
  fs::path checkpoint;
  fs::path manifest;
  EmbedderOptions embedder;
  std::string host = "127.0.0.1";
  int port = 8080;
  fs::path static_dir;  // optional directory served at /
};

std::unique_ptr<Service> load_service(const ServeOptions& options);
void cmd_serve(const ServeOptions& options, std::ostream& log);

/// Parses argv and dispatches. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
/// Same, with the arguments after the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace find3d::cli
