#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "gdpd/experiment.hpp"

namespace fs = std::filesystem;

namespace {

void print_aggregates(const std::string& key, const std::vector<gdpd::MethodAggregate>& aggs) {
    std::printf("[%s]\n", key.c_str());
    std::printf("  %-12s %9s %9s %9s %6s %6s %5s %5s %6s\n", "method", "auc_prc", "fidelity", "rank",
                "top1", "top3", "wins", "draws", "losses");
    for (const auto& a : aggs)
        std::printf("  %-12s %9.4f %9.4f %9.3f %6d %6d %5d %5d %6d\n", a.method.c_str(), a.avg_auc_prc,
                    a.avg_fidelity, a.avg_rank, a.num_top1, a.num_top3, a.wins, a.draws, a.losses);
}

int cmd_run(const std::string& config_path) {
    auto cfg = gdpd::ExperimentConfig::from_json_file(config_path);
    auto out = gdpd::run(cfg);
    std::printf("run complete: %d cell(s) trained, %d reused, output at %s\n", out.cells_trained,
                out.cells_reused, out.out_dir.string().c_str());
    for (const auto& sub : out.subs) print_aggregates(sub.key, sub.report.aggregates);
    return 0;
}

int cmd_report(const std::string& dir) {
    bool any = false;
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory() && fs::exists(entry.path() / "report.tsv")) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
        auto rep = gdpd::load_report(d);
        gdpd::write_report_aggregates(rep.aggregates, (d / "aggregates.tsv").string());
        print_aggregates(d.filename().string(), rep.aggregates);
        any = true;
    }
    if (!any) {
        std::cerr << "no report.tsv found under " << dir << "\n";
        return 1;
    }
    return 0;
}

int cmd_plot(const std::string& dir) {
    auto files = gdpd::emit_plots(dir);
    for (const auto& f : files) std::printf("wrote %s\n", f.string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GDPD experiment harness"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    auto* run_cmd = app.add_subcommand("run", "run an experiment config");
    run_cmd->add_option("config", config_path, "experiment config (JSON)")->required();
    auto* report_cmd = app.add_subcommand("report", "recompute and print aggregates");
    report_cmd->add_option("dir", out_dir, "experiment output directory")->required();
    auto* plot_cmd = app.add_subcommand("plot", "render SVG charts from reports");
    plot_cmd->add_option("dir", out_dir, "experiment output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed()) return cmd_run(config_path);
        if (report_cmd->parsed()) return cmd_report(out_dir);
        if (plot_cmd->parsed()) return cmd_plot(out_dir);
    } catch (const gdpd::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
