#pragma once

// Random three-level (edge, cloud, final) aggregation instance with
// data-proportional weights, compared against flat FedAvg over all users.

#include <algorithm>
#include <vector>

#include "generators.hpp"
#include "oracles.hpp"
#include "sagin/hfl.hpp"

namespace pipeline {

struct Outcome {
    double max_abs_error = 0.0;
    int users = 0;
    int tasks = 0;
};

inline Outcome random_instance(gen::Gen& g, int max_users = 6, int max_tasks = 2) {
    using sagin::hfl::TaskModel;
    Outcome out;
    const int K = g.integer(1, max_users), F = g.integer(1, max_tasks);
    const int M = g.integer(1, 3), N = g.integer(1, 4);
    out.users = K;
    out.tasks = F;
    std::vector<int> cluster(K), up(M);
    for (auto& c : cluster) c = g.integer(0, M - 1);
    for (auto& u : up) u = g.integer(0, N - 1);
    const int final_sat = up[g.integer(0, M - 1)];
    for (int f = 0; f < F; ++f) {
        const int dim = g.integer(1, 12);
        std::vector<TaskModel> local(K);
        std::vector<double> size(K);
        std::vector<std::vector<double>> raw;
        for (int k = 0; k < K; ++k) {
            local[k].task_id = f;
            local[k].params = sagin::nn::Vector(dim);
            for (int j = 0; j < dim; ++j) local[k].params[j] = g.real(-3, 3);
            size[k] = g.integer(1, 500);
            raw.emplace_back(local[k].params.data(), local[k].params.data() + dim);
        }
        // edge
        std::vector<TaskModel> edge(M);
        std::vector<double> uav_mass(M, 0.0);
        for (int m = 0; m < M; ++m) {
            std::vector<TaskModel> members;
            std::vector<double> w;
            for (int k = 0; k < K; ++k) {
                if (cluster[k] == m) {
                    members.push_back(local[k]);
                    w.push_back(size[k]);
                    uav_mass[m] += size[k];
                }
            }
            if (members.empty()) continue;
            for (auto& x : w) x /= uav_mass[m];
            edge[m] = sagin::hfl::edge_aggregate(members, w);
        }
        // cloud at every satellite other than the final one
        std::vector<TaskModel> direct, relayed;
        std::vector<double> final_mass;
        for (int m = 0; m < M; ++m) {
            if (uav_mass[m] > 0 && up[m] == final_sat) {
                direct.push_back(edge[m]);
                final_mass.push_back(uav_mass[m]);
            }
        }
        std::vector<double> relay_mass;
        for (int n = 0; n < N; ++n) {
            if (n == final_sat) continue;
            std::vector<TaskModel> members;
            std::vector<double> w;
            double mass = 0;
            for (int m = 0; m < M; ++m) {
                if (uav_mass[m] > 0 && up[m] == n) {
                    members.push_back(edge[m]);
                    w.push_back(uav_mass[m]);
                    mass += uav_mass[m];
                }
            }
            if (members.empty()) continue;
            for (auto& x : w) x /= mass;
            relayed.push_back(sagin::hfl::cloud_aggregate(members, w));
            relay_mass.push_back(mass);
        }
        final_mass.insert(final_mass.end(), relay_mass.begin(), relay_mass.end());
        double total = 0;
        for (double x : final_mass) total += x;
        for (auto& x : final_mass) x /= total;
        const auto global = sagin::hfl::final_aggregate(direct, relayed, final_mass);
        const auto want = oracle::fedavg(raw, size);
        for (int j = 0; j < dim; ++j) {
            out.max_abs_error = std::max(out.max_abs_error,
                                         static_cast<double>(std::abs(global.params[j] - want[j])));
        }
    }
    return out;
}

}  // namespace pipeline
