#include <benchmark/benchmark.h>

#include "sagin/env.hpp"
#include "sagin/harness.hpp"
#include "sagin/hfl.hpp"
#include "sagin/hybrid.hpp"

using namespace sagin;
using nn::Vector;

namespace {

void BM_EnvStep(benchmark::State& state) {
    env::Env e(ScenarioConfig{});
    e.reset(1);
    const std::vector<int> d(e.layout().discrete_size(), 0);
    const std::vector<double> c(e.layout().continuous_size(), 0.1);
    for (auto _ : state) {
        if (e.done()) e.reset(1);
        benchmark::DoNotOptimize(e.step(e.decode_action(d, c)));
    }
}
BENCHMARK(BM_EnvStep);

void BM_Decode(benchmark::State& state) {
    env::Env e(ScenarioConfig{});
    e.reset(2);
    Rng rng = make_stream(2, 0);
    std::vector<int> d(e.layout().discrete_size());
    std::vector<double> c(e.layout().continuous_size());
    for (auto& x : d) x = static_cast<int>(rng() % 97);
    for (auto& x : c) x = standard_normal(rng);
    for (auto _ : state) benchmark::DoNotOptimize(e.decode_action(d, c));
}
BENCHMARK(BM_Decode);

void BM_AgentUpdate(benchmark::State& state) {
    harness::SaginEnv env(ScenarioConfig{}, harness::Policy::HDsac);
    hybrid::Schedule s;
    s.batch_size = static_cast<int>(state.range(0));
    hybrid::HDsacAgent agent(env.observation_size(), env.discrete_options(), env.continuous_size(), s);
    Rng rng = make_stream(3, 0);
    std::vector<dsac::Transition> ts;
    Vector obs = env.reset(3);
    for (int i = 0; i < s.batch_size; ++i) {
        std::vector<int> d;
        Vector c;
        agent.act(obs, true, d, c);
        const auto r = env.step(d, std::span<const double>(c.data(), static_cast<std::size_t>(c.size())));
        ts.push_back({obs, c, d, r.reward, r.observation, r.terminal});
        obs = r.observation;
    }
    const dsac::Batch batch = dsac::make_batch(ts);
    for (auto _ : state) agent.update(batch);
}
BENCHMARK(BM_AgentUpdate)->Arg(32)->Arg(64);

void BM_Aggregate(benchmark::State& state) {
    const int members = static_cast<int>(state.range(0));
    std::vector<hfl::TaskModel> models;
    std::vector<double> weights(members, 1.0 / members);
    for (int i = 0; i < members; ++i) {
        hfl::TaskModel m;
        m.params = Vector::Random(300'000);
        models.push_back(std::move(m));
    }
    for (auto _ : state) benchmark::DoNotOptimize(hfl::edge_aggregate(models, weights));
}
BENCHMARK(BM_Aggregate)->Arg(3)->Arg(10);

}  // namespace

BENCHMARK_MAIN();
