// sagin: train, evaluate and summarize SAGIN federated-learning experiments.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sagin/harness.hpp"

namespace fs = std::filesystem;
using namespace sagin;

namespace {

struct Common {
    std::string config;
    std::string schedule;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::string out = "out";
    std::string name = "run";
    bool reuse = false;
    bool fresh_scenarios = false;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("-c,--config", c.config, "scenario JSON (defaults when omitted)")->check(CLI::ExistingFile);
    cmd->add_option("-s,--schedule", c.schedule, "training schedule JSON")->check(CLI::ExistingFile);
    cmd->add_option("--seeds", c.seeds, "seed list, e.g. 1,2,3")->delimiter(',');
    cmd->add_option("-o,--out", c.out, "output directory");
    cmd->add_option("-n,--name", c.name, "experiment name");
    cmd->add_flag("--reuse-agents", c.reuse, "load agents saved by an earlier run of the same name");
    cmd->add_flag("--fresh-scenarios", c.fresh_scenarios, "train on a new layout every episode");
}

harness::ExperimentSpec make_spec(const Common& c) {
    harness::ExperimentSpec spec;
    if (!c.config.empty()) spec.scenario = load_scenario(c.config);
    if (!c.schedule.empty()) spec.schedule = hybrid::load_schedule(c.schedule);
    spec.seeds = c.seeds;
    spec.output_dir = c.out;
    spec.name = c.name;
    spec.reuse_agents = c.reuse;
    spec.pin_training_scenario = !c.fresh_scenarios;
    return spec;
}

void report(const std::string& command, const fs::path& csv) {
    nlohmann::json j{{"status", "ok"}, {"command", command}, {"csv", csv.string()}};
    std::cout << j.dump() << '\n';
}

int fail(const std::string& kind, const std::string& message, int code) {
    nlohmann::json j{{"status", "error"}, {"kind", kind}, {"message", message}};
    std::cerr << j.dump() << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SAGIN hierarchical federated learning simulator with an H-DSAC agent"};
    app.require_subcommand(1);

    Common common;
    std::string policy = "hdsac";
    std::string baseline;
    std::string axis;
    std::vector<double> values;
    std::vector<std::string> inputs;
    std::string summary_out;

    auto* run = app.add_subcommand("run", "train and evaluate one policy");
    add_common(run, common);
    run->add_option("-p,--policy", policy, "hdsac, hdsac_fedavg, hdsac_hovering, random, fixed_reward");

    auto* base = app.add_subcommand("baseline", "run a baseline policy");
    add_common(base, common);
    base->add_option("baseline", baseline, "hdsac_fedavg, hdsac_hovering, random or fixed_reward")->required();

    auto* sweep = app.add_subcommand("sweep", "evaluate one policy across a scenario axis");
    add_common(sweep, common);
    sweep->add_option("-p,--policy", policy, "policy name");
    sweep->add_option("-a,--axis", axis, "time, user_power, task_count_iid, task_count_noniid, elevation")
        ->required();
    sweep->add_option("--values", values, "axis values; defaults per axis")->delimiter(',');

    auto* summ = app.add_subcommand("summarize", "mean and population std of final accuracy over seeds");
    summ->add_option("csv", inputs, "metrics CSV files")->required()->check(CLI::ExistingFile);
    summ->add_option("-o,--out", summary_out, "summary CSV (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), 2);
    }

    try {
        if (*run) {
            auto spec = make_spec(common);
            spec.policy = harness::parse_policy(policy);
            report("run", harness::run_experiment(spec).csv);
        } else if (*base) {
            report("baseline", harness::run_baseline(baseline, make_spec(common)).csv);
        } else if (*sweep) {
            auto spec = make_spec(common);
            spec.policy = harness::parse_policy(policy);
            spec.sweep = harness::parse_sweep(axis);
            if (spec.sweep == harness::SweepAxis::None) throw std::invalid_argument("sweep.axis: choose an axis");
            spec.sweep_values = values;
            report("sweep", harness::run_experiment(spec).csv);
        } else if (*summ) {
            std::vector<fs::path> paths(inputs.begin(), inputs.end());
            const auto rows = harness::emit_summary(paths);
            if (summary_out.empty()) {
                harness::write_summary(std::cout, rows);
            } else {
                std::ofstream f(summary_out);
                if (!f) throw std::runtime_error("cannot write " + summary_out);
                harness::write_summary(f, rows);
                report("summarize", summary_out);
            }
        }
    } catch (const std::invalid_argument& e) {
        return fail("config", e.what(), 2);
    } catch (const nlohmann::json::exception& e) {
        return fail("config", e.what(), 2);
    } catch (const std::exception& e) {
        return fail("runtime", e.what(), 1);
    }
    return 0;
}
