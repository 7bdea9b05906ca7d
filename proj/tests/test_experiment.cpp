#include "pmjdot/experiment.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace pmjdot;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config(AblationMode mode = AblationMode::v5) {
  ExperimentConfig c;
  c.data.class_count = 4;
  c.data.ambient_dim = 8;
  c.data.photos_per_class = 16;
  c.data.sketches_per_class = 12;
  c.data.queries_per_class = 3;
  c.training.batch_size = 8;
  c.training.queue_size = 16;
  c.training.bank_size = 32;
  c.training.prototype_count = 4;
  c.training.hidden_widths = {12};
  c.training.embedding_dim = 6;
  c.mode = mode;
  c.epochs = 4;
  c.eval_k = 10;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pmjdot_test_experiment_" + name);
  fs::remove_all(p);
  return p;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string parse_error_of(const nlohmann::json& j) {
  try {
    checkpoint_from_json(j);
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("zero epochs evaluates the random encoder") {
  ExperimentConfig c = small_config(AblationMode::v1);
  c.epochs = 0;
  const LabeledCorpus corpus = corpus_for(c);
  RunResult r = run_experiment(c, corpus, {});
  REQUIRE(r.history.size() == 1);
  const Encoder reference = r.state.encoder;
  const RetrievalReport direct = evaluate(reference.encode(Matrix(corpus.query_sketch.vectors.cast<double>())),
                                          corpus.query_sketch.labels,
                                          reference.encode(Matrix(corpus.gallery_photo.vectors.cast<double>())),
                                          corpus.gallery_photo.labels, c.eval_k);
  CHECK(r.history[0].map == direct.map);
  CHECK(r.final_report.map == direct.map);
  CHECK(r.state.step == 0);
}

TEST_CASE("identical runs write identical metrics") {
  const ExperimentConfig c = small_config();
  const LabeledCorpus corpus = corpus_for(c);
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  run_experiment(c, corpus, {a.string()});
  run_experiment(c, corpus, {b.string()});
  CHECK(read_file(a / "metrics.json") == read_file(b / "metrics.json"));
  CHECK(read_file(a / "metrics.csv") == read_file(b / "metrics.csv"));
  CHECK(read_file(a / "checkpoint.json") == read_file(b / "checkpoint.json"));
  ExperimentConfig other = c;
  other.seed = 1;
  const fs::path d = scratch("det_c");
  run_experiment(other, corpus, {d.string()});
  CHECK(read_file(a / "metrics.json") != read_file(d / "metrics.json"));
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(d);
}

TEST_CASE("resuming reproduces the straight run") {
  for (AblationMode mode : {AblationMode::v2, AblationMode::v4, AblationMode::v5}) {
    ExperimentConfig c = small_config(mode);
    c.training.alternation = Alternation::epoch;
    const LabeledCorpus corpus = corpus_for(c);
    const fs::path straight = scratch("straight"), split = scratch("split");
    run_experiment(c, corpus, {straight.string()});
    RunOptions half{split.string()};
    half.stop_after_epoch = 2;
    RunResult partial = run_experiment(c, corpus, half);
    CHECK(partial.history.size() == 3);
    RunOptions rest{split.string()};
    rest.resume_from = (split / "checkpoint.json").string();
    run_experiment(c, corpus, rest);
    CHECK(read_file(straight / "metrics.json") == read_file(split / "metrics.json"));
    CHECK(read_file(straight / "checkpoint.json") == read_file(split / "checkpoint.json"));
    fs::remove_all(straight);
    fs::remove_all(split);
  }
}

TEST_CASE("resume refuses a different configuration") {
  ExperimentConfig c = small_config();
  c.epochs = 1;
  const LabeledCorpus corpus = corpus_for(c);
  const fs::path dir = scratch("refuse");
  run_experiment(c, corpus, {dir.string()});
  ExperimentConfig changed = c;
  changed.training.nu = 2.0;
  CHECK(config_hash(changed) != config_hash(c));
  RunOptions opts;
  opts.resume_from = (dir / "checkpoint.json").string();
  CHECK_THROWS_WITH_AS(run_experiment(changed, corpus, opts), doctest::Contains("config hash"), std::runtime_error);

  nlohmann::json j = nlohmann::json::parse(read_file(dir / "checkpoint.json"));
  j["version"] = "other";
  std::ofstream((dir / "old.json").string()) << j.dump();
  opts.resume_from = (dir / "old.json").string();
  CHECK_THROWS_WITH_AS(run_experiment(c, corpus, opts), doctest::Contains("version"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("corrupt checkpoints name the offending field") {
  ExperimentConfig c = small_config();
  c.epochs = 1;
  const fs::path dir = scratch("corrupt");
  run_experiment(c, corpus_for(c), {dir.string()});
  const nlohmann::json good = nlohmann::json::parse(read_file(dir / "checkpoint.json"));
  CHECK(parse_error_of(good).empty());

  nlohmann::json j = good;
  j["state"].erase("photo_bank");
  CHECK(parse_error_of(j).find("checkpoint.state.photo_bank") != std::string::npos);
  j = good;
  j["state"]["prototypes"]["data"][0].erase(0);
  CHECK(parse_error_of(j).find("checkpoint.state.prototypes.data[0]") != std::string::npos);
  j = good;
  j["epoch"] = "one";
  CHECK(parse_error_of(j).find("checkpoint.epoch") != std::string::npos);
  j = good;
  j["state"]["encoder"]["widths"] = {8, 3, 6};
  CHECK(parse_error_of(j).find("checkpoint.state.encoder.layers[0]") != std::string::npos);

  std::ofstream((dir / "broken.json").string()) << "{\"version\": ";
  CHECK_THROWS_AS(load_checkpoint((dir / "broken.json").string()), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("ablation wiring") {
  const ExperimentConfig base = small_config();
  CHECK(wire_ablation(base.training, AblationMode::v1).alignment == AlignmentMode::none);
  CHECK(wire_ablation(base.training, AblationMode::v2).alignment == AlignmentMode::batch);
  CHECK(wire_ablation(base.training, AblationMode::v3).bank_size == base.training.batch_size);
  CHECK(wire_ablation(base.training, AblationMode::v4).alignment == AlignmentMode::bank);
  CHECK(wire_ablation(base.training, AblationMode::v5).bank_size == base.training.bank_size);

  const LabeledCorpus corpus = corpus_for(base);
  ExperimentConfig c = base;
  c.epochs = 1;
  c.mode = AblationMode::v1;
  const EpochMetrics v1 = run_experiment(c, corpus, {}).history.back();
  CHECK(v1.alignment_ot_calls == 0);
  c.mode = AblationMode::v5;
  const EpochMetrics v5 = run_experiment(c, corpus, {}).history.back();
  CHECK(v5.alignment_ot_calls > 0);
  CHECK(v5.alignment_ot_rows == base.training.prototype_count);
  CHECK(v5.alignment_ot_cols == base.training.bank_size);
  CHECK(v5.alignment_ot_cols > base.training.batch_size);
  CHECK(v5.max_marginal_residual < 1e-2);
  c.mode = AblationMode::v3;
  CHECK(run_experiment(c, corpus, {}).history.back().alignment_ot_cols == base.training.batch_size);
  for (AblationMode m : {AblationMode::v1, AblationMode::v2, AblationMode::v3, AblationMode::v4, AblationMode::v5})
    CHECK(ablation_mode_from_string(to_string(m)) == m);
  CHECK_THROWS(ablation_mode_from_string("v6"));
}

TEST_CASE("ablate writes one directory per run and a combined table") {
  ExperimentConfig c = small_config();
  c.epochs = 1;
  const fs::path dir = scratch("ablate");
  auto runs = ablate(c, {AblationMode::v1, AblationMode::v5}, {0, 1}, dir.string());
  CHECK(runs.size() == 4);
  CHECK(fs::exists(dir / "v5_seed1" / "metrics.json"));
  const std::string csv = read_file(dir / "ablation.csv");
  CHECK(csv.rfind(kMetricsCsvHeader, 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4 * 2);
  fs::remove_all(dir);
}

TEST_CASE("configuration JSON round-trips and rejects unknown keys") {
  ExperimentConfig c = small_config(AblationMode::v3);
  c.training.cost.alpha = 0.25;
  c.training.augmentation.noise_sigma = 0.05;
  c.data.rotation_degrees = {10.0};
  const nlohmann::json j = to_json(c);
  const ExperimentConfig back = experiment_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(config_hash(back) == config_hash(c));

  CHECK(config_hash(experiment_config_from_json(nlohmann::json::object())) == config_hash(ExperimentConfig{}));
  nlohmann::json bad = j;
  bad["training"]["learning_rat"] = 0.1;
  CHECK_THROWS_WITH_AS(experiment_config_from_json(bad), doctest::Contains("learning_rat"), ParseError);
  bad = j;
  bad["epochs"] = "many";
  CHECK_THROWS_AS(experiment_config_from_json(bad), ParseError);
  bad = j;
  bad["mode"] = "v9";
  CHECK_THROWS(experiment_config_from_json(bad));
}
