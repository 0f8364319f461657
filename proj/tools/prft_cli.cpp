#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "prft/harness.hpp"

namespace {

// CLI11 leaves std::optional empty when a flag is absent.
template <typename T>
std::optional<T> maybe(const CLI::Option* opt, const T& value) {
    return opt->count() ? std::optional<T>(value) : std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Predicted-reward fine-tuning lab"};
    app.set_version_flag("--version", std::string(PRFT_VERSION));
    app.require_subcommand(1);

    std::string config, out, checkpoint, input;
    std::uint64_t seed = 0;
    int snapshot_every = 5000, workers = 1;
    double kappa = 0.0;
    std::vector<double> kappas;
    std::vector<std::string> checkpoints;

    auto* train = app.add_subcommand("train", "Train a policy and reward model in the source domain");
    train->add_option("--config", config, "Run config file (or a train manifest)")->required();
    auto* train_out = train->add_option("--out", out, "Output root (overrides PRFT_OUT_ROOT)");
    auto* train_seed = train->add_option("--seed", seed, "Master seed override");
    auto* train_snap = train->add_option("--snapshot-every", snapshot_every, "Evaluation snapshot period");

    auto* ft = app.add_subcommand("finetune", "Reward-free fine-tuning in a shifted target domain");
    ft->add_option("checkpoint", checkpoint, "Run or checkpoint directory");
    auto* ft_kappa = ft->add_option("--kappa", kappa, "Target distraction intensity in [0, 1]");
    auto* ft_config = ft->add_option("--config", config, "Config overrides (or a fine-tune manifest)");
    auto* ft_out = ft->add_option("--out", out, "Output root (overrides PRFT_OUT_ROOT)");
    auto* ft_seed = ft->add_option("--seed", seed, "Master seed override");
    auto* ft_snap = ft->add_option("--snapshot-every", snapshot_every, "Evaluation snapshot period in steps");

    auto* sweep = app.add_subcommand("sweep", "Seed x intensity x phase sweep");
    sweep->add_option("--config", config, "Sweep file (or a sweep manifest)")->required();
    auto* sweep_out = sweep->add_option("--out", out, "Output root (overrides PRFT_OUT_ROOT)");
    sweep->add_option("--workers", workers, "Concurrent jobs")->check(CLI::PositiveNumber);
    auto* sweep_snap = sweep->add_option("--snapshot-every", snapshot_every, "Evaluation snapshot period");

    auto* diag = app.add_subcommand("diagnose", "Reward fit and robust-set margin diagnostics");
    diag->add_option("checkpoints", checkpoints, "Run or checkpoint directories")->required();
    auto* diag_kappa = diag->add_option("--kappa", kappas, "Intensities, comma separated")->delimiter(',');
    auto* diag_out = diag->add_option("--out", out, "Output directory");

    auto* plot = app.add_subcommand("plotdata", "Sweep summary to long-format CSV");
    plot->add_option("summary", input, "summary.csv from a sweep")->required();
    auto* plot_out = plot->add_option("--out", out, "Output file (default stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train)
            return prft::cmd_train({config, maybe(train_out, out), maybe(train_seed, seed), maybe(train_snap, snapshot_every)});
        if (*ft)
            return prft::cmd_finetune({checkpoint, maybe(ft_kappa, kappa), maybe(ft_config, config), maybe(ft_out, out),
                                       maybe(ft_seed, seed), maybe(ft_snap, snapshot_every)});
        if (*sweep) return prft::cmd_sweep({config, maybe(sweep_out, out), workers, maybe(sweep_snap, snapshot_every)});
        if (*diag) {
            prft::DiagnoseOptions opt;
            opt.checkpoints = checkpoints;
            if (diag_kappa->count()) opt.kappas = kappas;
            opt.out = maybe(diag_out, out);
            return prft::cmd_diagnose(opt);
        }
        if (*plot) return prft::cmd_plotdata({input, maybe(plot_out, out)});
    } catch (const std::exception& e) {
        std::cerr << "prft: " << e.what() << "\n";
        return prft::kExitFailure;
    }
    return prft::kExitUsage;
}
