#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "isacfi/experiments.hpp"

using namespace isacfi;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

ExperimentContext small(std::size_t threads, std::size_t trials = 6) {
  ExperimentContext ctx;
  ctx.seed = 5;
  ctx.threads = threads;
  ctx.config.set("experiment.trials", std::to_string(trials));
  return ctx;
}

}  // namespace

TEST(ParallelFor, VisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(101);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(ParallelFor, PropagatesException) {
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 7) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

TEST(Registry, NamesUniqueAndFindable) {
  std::set<std::string> names;
  for (const auto& e : experiments()) {
    EXPECT_TRUE(names.insert(e.name).second) << e.name;
    EXPECT_EQ(find_experiment(e.name), &e);
  }
  EXPECT_EQ(names.size(), 10u);
  EXPECT_EQ(find_experiment("unknown-name"), nullptr);
}

TEST(Experiments, ResultsIndependentOfWorkerCount) {
  for (const char* name : {"ranging", "los-dominance", "phase-offsets"}) {
    const auto* e = find_experiment(name);
    const auto a = e->run(small(1));
    const auto b = e->run(small(3));
    ASSERT_EQ(a.tables.size(), b.tables.size());
    for (std::size_t t = 0; t < a.tables.size(); ++t) EXPECT_EQ(a.tables[t].rows, b.tables[t].rows) << name;
  }
}

TEST(Experiments, SeedChangesOutput) {
  auto c1 = small(1), c2 = small(1);
  c2.seed = 6;
  const auto* e = find_experiment("ranging");
  EXPECT_NE(e->run(c1).tables[0].rows, e->run(c2).tables[0].rows);
}

TEST(Experiments, RangingCsvFollowsEstimateSchema) {
  const auto out = find_experiment("ranging")->run(small(1, 3));
  ASSERT_FALSE(out.tables.empty());
  EXPECT_EQ(out.tables[0].header, "trial,truth_range_m,est_range_m,method,snr_db,schedule_kind");
  EXPECT_EQ(out.tables[0].rows.size(), 9u);  // three methods per trial
}

TEST(WriteOutputs, EveryFileCarriesHeaderAndIsReproducible) {
  const auto dir = (std::filesystem::temp_directory_path() / "isacfi_outputs_test").string();
  std::filesystem::remove_all(dir);
  const auto ctx = small(2);
  const auto out = find_experiment("cancellation-budget")->run(ctx);
  const auto paths = write_outputs(out, dir + "/a", ctx.seed, ctx.config.hash(), true);
  const auto again = write_outputs(find_experiment("cancellation-budget")->run(ctx), dir + "/b", ctx.seed,
                                   ctx.config.hash(), true);
  ASSERT_EQ(paths.size(), again.size());
  const auto header = output_header("cancellation-budget", 5, ctx.config.hash());
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const auto text = slurp(paths[i]);
    EXPECT_EQ(text.substr(0, header.size()), header) << paths[i];
    EXPECT_EQ(text, slurp(again[i])) << paths[i];
  }
  std::filesystem::remove_all(dir);
}
