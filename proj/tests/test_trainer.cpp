#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "checks.hpp"
#include "doctest.h"
#include "test_util.hpp"
#include "vtcd/error.hpp"
#include "vtcd/trainer.hpp"

using namespace vtcd;

namespace {

DatasetManifest tiny_dataset(const std::filesystem::path& dir, std::uint64_t seed, int n = 3) {
  PhantomSpec ps;
  ps.dims = {16, 16, 16};
  ps.num_cells = 1;
  ps.radius_min = 3;
  ps.radius_max = 5;
  ps.seed = seed;
  DegradationSpec ds;
  ds.seed = seed + 1;
  return build_dataset(n, ps, ds, dir);
}

TrainConfig tiny_config(std::array<int, 3> epochs, std::uint64_t seed = 3) {
  TrainConfig cfg;
  cfg.epochs_per_phase = epochs;
  cfg.steps_per_epoch = 2;
  cfg.batch_size = 2;
  cfg.seed = seed;
  cfg.denoiser = {4, 6, 8};
  cfg.srm.d = 4;
  cfg.srm.acc_hidden = 8;
  cfg.srm.head_hidden = 8;
  cfg.crop = 8;
  return cfg;
}

TrainOptions quiet() {
  TrainOptions o;
  o.write_files = false;
  return o;
}

bool same_prefix_params(const Checkpoint& a, const Checkpoint& b, const std::string& prefix) {
  bool any = false;
  for (const auto& [name, t] : a.params) {
    if (name.rfind(prefix, 0) != 0) continue;
    any = true;
    if (t.v != b.params.at(name).v) return false;
  }
  return any;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.learning_rate == 5e-3);
  CHECK(c.amsgrad);
  c.steps_per_epoch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epochs_per_phase = {1, -1, 1};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.loss_weights.w_cyc = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config JSON round trip, defaults and unknown keys") {
  TrainConfig c = tiny_config({1, 2, 3});
  c.edit.lambda = 0.25;
  c.loss_weights.phase_schedule[Phase::Joint].w_adv = 0.5;
  const TrainConfig back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(back.epochs_per_phase == std::array<int, 3>{1, 2, 3});
  CHECK(back.edit.lambda == 0.25);

  const TrainConfig partial = train_config_from_json(nlohmann::json{{"steps_per_epoch", 7}});
  CHECK(partial.steps_per_epoch == 7);
  CHECK(partial.T == TrainConfig{}.T);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"stepz", 7}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epochs_per_phase", {1, 2}}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"learning_rate", "fast"}}), ConfigError);
}

TEST_CASE("config files") {
  test::TempDir dir("cfg");
  {
    std::ofstream os(dir / "bad.json");
    os << "{ nope";
  }
  CHECK_THROWS_AS(load_train_config(dir / "bad.json"), ConfigError);
  {
    std::ofstream os(dir / "ok.json");
    os << to_json(tiny_config({0, 0, 1})).dump();
  }
  CHECK(load_train_config(dir / "ok.json").epochs_per_phase[2] == 1);
  CHECK_THROWS(load_train_config(dir / "missing.json"));
}

TEST_CASE("zero epochs return the initial parameters") {
  test::TempDir dir("zero");
  const auto man = tiny_dataset(dir / "data", 1);
  const TrainConfig cfg = tiny_config({0, 0, 0});
  const Checkpoint ck = train(cfg, man, dir / "out");
  CHECK(ck.completed_epochs == 0);
  CHECK(ck.global_step == 0);
  CHECK(std::filesystem::exists(dir / "out" / "final.vtck"));
  CHECK_FALSE(std::filesystem::exists(dir / "out" / "last.vtck"));
  Models fresh(cfg, man.entries[0].degradation_spec.axial_blur_sigma);
  for (auto* p : fresh.all_params()) {
    CAPTURE(p->name);
    REQUIRE(ck.params.count(p->name) == 1);
    CHECK(ck.params.at(p->name).v == p->value.v);
  }
}

TEST_CASE("training is deterministic for a seed") {
  test::TempDir dir("det");
  const auto man = tiny_dataset(dir / "data", 2);
  std::vector<double> la, lb;
  TrainOptions oa = quiet(), ob = quiet();
  oa.on_step = [&](const StepRecord& r) { la.push_back(r.loss.total); };
  ob.on_step = [&](const StepRecord& r) { lb.push_back(r.loss.total); };
  const Checkpoint a = train(tiny_config({1, 1, 1}), man, dir / "a", oa);
  const Checkpoint b = train(tiny_config({1, 1, 1}), man, dir / "b", ob);
  CHECK(la.size() == 6);
  CHECK(la == lb);
  CHECK(same_prefix_params(a, b, ""));
  const Checkpoint c = train(tiny_config({1, 1, 1}, 99), man, dir / "c", quiet());
  CHECK_FALSE(same_prefix_params(a, c, "dn."));
}

TEST_CASE("step records follow the phase order") {
  test::TempDir dir("order");
  const auto man = tiny_dataset(dir / "data", 3);
  std::vector<StepRecord> rec;
  TrainOptions o = quiet();
  o.on_step = [&](const StepRecord& r) { rec.push_back(r); };
  const Checkpoint ck = train(tiny_config({1, 2, 1}), man, dir / "o", o);
  REQUIRE(rec.size() == 8);
  for (std::size_t i = 0; i < rec.size(); ++i) CHECK(rec[i].step == static_cast<long>(i) + 1);
  CHECK(rec[0].phase == Phase::Denoise);
  CHECK(rec[2].phase == Phase::Sr);
  CHECK(rec[4].epoch == 1);
  CHECK(rec[7].phase == Phase::Joint);
  for (const auto& r : rec) CHECK(std::isfinite(r.loss.total));
  CHECK(ck.completed_epochs == 4);
  CHECK(ck.phase == Phase::Joint);
  CHECK(ck.hyperplane.has_value());
}

TEST_CASE("each phase only moves its own generator") {
  test::TempDir dir("phase");
  const auto man = tiny_dataset(dir / "data", 4);
  const Checkpoint init = train(tiny_config({0, 0, 0}), man, dir / "i", quiet());
  const Checkpoint dn = train(tiny_config({1, 0, 0}), man, dir / "d", quiet());
  const Checkpoint sr = train(tiny_config({0, 1, 0}), man, dir / "s", quiet());
  CHECK(same_prefix_params(init, dn, "srm."));
  CHECK_FALSE(same_prefix_params(init, dn, "dn."));
  CHECK(same_prefix_params(init, sr, "dn."));
  CHECK_FALSE(same_prefix_params(init, sr, "srm.acc"));
  CHECK(same_prefix_params(init, sr, "srm.enc"));
  CHECK(same_prefix_params(init, dn, "srm.enc"));
}

TEST_CASE("loss log has one line per epoch") {
  test::TempDir dir("log");
  const auto man = tiny_dataset(dir / "data", 5);
  train(tiny_config({1, 1, 1}), man, dir / "o");
  std::ifstream is(dir / "o" / "loss_log.jsonl");
  int n = 0;
  std::string line;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("phase"));
    CHECK(j.at("loss").contains("total"));
    ++n;
  }
  CHECK(n == 3);
}

TEST_CASE("dataset and config mismatches") {
  test::TempDir dir("mismatch");
  const auto man = tiny_dataset(dir / "data", 6);
  TrainConfig cfg = tiny_config({1, 0, 0});
  cfg.sr_scale = 2;
  CHECK_THROWS_AS(train(cfg, man, dir / "o", quiet()), ConfigError);
  DatasetManifest empty = man;
  empty.train.clear();
  CHECK_THROWS_AS(train(tiny_config({1, 0, 0}), empty, dir / "o", quiet()), ConfigError);
}

TEST_CASE("resume reproduces the uninterrupted run") {
  test::TempDir dir("resume");
  const auto r = checks::checkpoint_resume(dir.path(), 7);
  CHECK(r.steps_compared == 6);
  CHECK(r.losses_equal);
  CHECK(r.params_equal);
  CHECK(r.blobs_equal);
}

TEST_CASE("resume refuses a different configuration") {
  test::TempDir dir("resume_cfg");
  const auto man = tiny_dataset(dir / "data", 8);
  train(tiny_config({1, 0, 0}), man, dir / "a");
  TrainConfig other = tiny_config({1, 1, 0});
  other.batch_size = 3;
  TrainOptions o = quiet();
  o.resume = dir / "a" / "last.vtck";
  CHECK_THROWS_AS(train(other, man, dir / "b", o), ConfigError);
}

TEST_CASE("checkpoint corruption is detected") {
  test::TempDir dir("ckpt");
  const auto man = tiny_dataset(dir / "data", 9, 2);
  train(tiny_config({0, 0, 0}), man, dir / "o");
  const auto good = dir / "o" / "final.vtck";
  const std::string blob = slurp(good);

  {
    std::ofstream os(dir / "short.vtck", std::ios::binary);
    os << blob.substr(0, blob.size() - 5);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "short.vtck"), FormatError);
  {
    std::ofstream os(dir / "magic.vtck", std::ios::binary);
    os << "XXXX" << blob.substr(4);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.vtck"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.vtck"), IoError);

  Checkpoint ck = load_checkpoint(good);
  ck.format_version = kCheckpointVersion + 1;
  save_checkpoint(ck, dir / "v2.vtck");
  CHECK_THROWS_AS(load_checkpoint(dir / "v2.vtck"), FormatError);
}

TEST_CASE("restore modes and output shapes") {
  test::TempDir dir("restore");
  const auto man = tiny_dataset(dir / "data", 10, 2);
  const Checkpoint ck = train(tiny_config({1, 1, 0}), man, dir / "o", quiet());
  const Volume3D lr = load_volume(man.degraded(0));
  CHECK(lr.dims() == Dims{16, 16, 4});
  const Volume3D full = restore_volume(ck, lr);
  CHECK(full.dims() == Dims{16, 16, 16});
  CHECK(full.within_range());
  CHECK(restore_volume(ck, lr, RestoreMode::DenoiseOnly).dims() == lr.dims());
  CHECK(restore_volume(ck, lr, RestoreMode::SrOnly).dims() == Dims{16, 16, 16});
  CHECK(test::bit_equal(restore_volume(ck, lr), full));
}

}  // TEST_SUITE
