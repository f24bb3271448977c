#include <latent_atlas/pipeline.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace la = latent_atlas;
namespace lp = latent_atlas::pipeline;

namespace {

struct CommonArgs {
    std::string config;
    std::optional<int> threads;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config,-c", args.config, "Pipeline config (JSON)")->required();
    cmd->add_option("--threads", args.threads, "Worker threads (overrides config and LATENT_ATLAS_THREADS)");
    cmd->add_option("--out", args.out, "Output directory (overrides config and LATENT_ATLAS_OUT)");
}

lp::Context context_from(const CommonArgs& args) {
    return lp::make_context(lp::load_config(args.config), args.out, args.threads);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"latent-atlas: embed, discretise, map and profile a dataset"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(lp::version));

    CommonArgs args;
    std::optional<std::string> target;
    std::optional<std::string> method;

    struct Command {
        const char* name;
        const char* help;
    };
    const Command commands[] = {
        {"run", "Run every stage in order"},
        {"ingest", "Load datasets, assign roles, fit scaling"},
        {"embed", "Fit the embedding (or load precomputed coordinates)"},
        {"transform", "Project the statistics and prediction sets"},
        {"dls", "Build the discrete latent space"},
        {"map", "Correlation maps and clusters per target"},
        {"profile", "Feature profiles of every cluster"},
        {"train", "Cross-validated forest on embedding coordinates"},
        {"predict", "Predict the prediction set with the trained models"},
        {"report", "Assemble report.json and plots"},
    };
    std::map<std::string, CLI::App*> subs;
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        add_common(sub, args);
        subs[c.name] = sub;
    }
    subs["map"]->add_option("--target", target, "Only this target (column=label, or a class label)");
    subs["map"]->add_option("--method", method, "Override the correlation method (pearson, point-biserial, auto)");
    subs["profile"]->add_option("--target", target, "Only this target");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        const auto ctx = context_from(args);
        std::filesystem::create_directories(ctx.out);
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "run") {
            lp::run_pipeline(ctx);
        } else if (cmd == "ingest") {
            lp::stage_ingest(ctx);
        } else if (cmd == "embed") {
            lp::stage_embed(ctx);
        } else if (cmd == "transform") {
            lp::stage_transform(ctx);
        } else if (cmd == "dls") {
            lp::stage_dls(ctx);
        } else if (cmd == "map") {
            lp::stage_map(ctx, {target, method});
        } else if (cmd == "profile") {
            lp::stage_profile(ctx, target);
        } else if (cmd == "train") {
            lp::stage_train(ctx);
        } else if (cmd == "predict") {
            lp::stage_predict(ctx);
        } else if (cmd == "report") {
            lp::stage_report(ctx);
        }
        std::cout << cmd << ": ok (" << ctx.out.string() << ")\n";
        return 0;
    } catch (const la::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
}
