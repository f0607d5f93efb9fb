#include <benchmark/benchmark.h>

#include <filesystem>
#include <numeric>

#include "ffkv/io.hpp"
#include "ffkv/triggers.hpp"
#include "test_models.hpp"

using namespace ffkv;

namespace {

ModelConfig desk_config() {
    ModelConfig c;
    c.n_layers = 4;
    c.d_model = 64;
    c.d_ff = 256;
    c.n_heads = 4;
    c.vocab_size = 2000;
    c.max_seq_len = 64;
    return c;
}

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (float& v : m.values()) v = static_cast<float>(rng.normal());
    return m;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const Matrix a = random_matrix(rng, n, n), b = random_matrix(rng, n, n);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Forward(benchmark::State& state) {
    const ModelConfig cfg = desk_config();
    const Model m(cfg, testing::random_weights(cfg, 2, 0.05));
    Rng rng(3);
    const auto tokens = testing::random_tokens(rng, static_cast<std::size_t>(state.range(0)), cfg.vocab_size);
    for (auto _ : state) benchmark::DoNotOptimize(m.forward(tokens, {false, 0}));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(64);

void BM_TopK(benchmark::State& state) {
    Rng rng(4);
    std::vector<ScoredId> items(static_cast<std::size_t>(state.range(0)));
    for (std::size_t i = 0; i < items.size(); ++i) items[i] = {i, static_cast<float>(rng.normal())};
    for (auto _ : state) {
        TopKSelector sel(50);
        for (const auto& it : items) sel.push(it);
        benchmark::DoNotOptimize(sel.sorted());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TopK)->Arg(10000)->Arg(100000);

void BM_Scan(benchmark::State& state) {
    const PreparedCorpus p =
        prepare_corpus({read_file(std::filesystem::path(FFKV_FIXTURE_DIR) / "scan_corpus.txt")}, 200, 24, 0.0);
    ModelConfig cfg = testing::tiny_config(2, p.corpus.vocab().size());
    cfg.max_seq_len = 24;
    const Model m(cfg, testing::random_weights(cfg, 17));
    std::vector<std::size_t> ids(p.corpus.sentences().size());
    std::iota(ids.begin(), ids.end(), 0);
    const auto keys = all_keys(cfg);
    for (auto _ : state) benchmark::DoNotOptimize(scan_triggers(m, p.corpus, ids, keys, {5, 1}));
}
BENCHMARK(BM_Scan);

}  // namespace

BENCHMARK_MAIN();
