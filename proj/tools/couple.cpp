// couple <subcommand> --config <path> [--set key=value ...]

#include <iostream>

#include <CLI11.hpp>

#include <couple/cli.hpp>

namespace {

int fail(const std::string& command, const std::string& code, const std::string& message, int status)
{
    std::cerr << couple::cli::error_record(command, code, message).dump() << std::endl;
    return status;
}

} // namespace

int main(int argc, char** argv)
{
    using namespace couple;

    CLI::App app{"Domain-adaptive hashing pipeline: graph diffusion selection, mixup hash training, Hamming retrieval"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::vector<std::string> overrides;
    bool quiet = false;

    const std::map<std::string, std::string> help = {
        {"synth", "write the benchmark datasets into the run directory"},
        {"graph", "build the mutual-kNN relationship graph"},
        {"diffuse", "solve flow diffusion and select the confident target set"},
        {"train", "warm up, then run the adaptation rounds"},
        {"encode", "hash source and target with the trained model"},
        {"index", "build the packed source-code database"},
        {"query", "top-K Hamming search for every target code"},
        {"eval", "retrieval metrics of target queries against the source database"},
        {"speedtest", "packed Hamming scan against a float32 dense scan"},
        {"sweep", "gamma and walk-length sensitivity table"},
    };
    for (const auto& [name, fn] : cli::commands()) {
        auto* sub = app.add_subcommand(name, help.at(name));
        sub->add_option("--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
        sub->add_option("--set", overrides, "override a config key, e.g. --set gamma=0.3")->take_all();
        sub->add_flag("--quiet", quiet, "do not print the report");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name(), "usage", e.what(),
                    2);
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const RunConfig cfg = load_config(config_path, overrides);
        const nlohmann::json report = cli::commands().at(command)(cfg);
        for (const auto& w : report.value("warnings", nlohmann::json::array()))
            std::cerr << "warning: " << w.get<std::string>() << "\n";
        if (!quiet) std::cout << report.dump(2) << std::endl;
        return 0;
    } catch (const Error& e) {
        return fail(command, std::string(to_string(e.code())), e.what(), 1);
    } catch (const std::exception& e) {
        return fail(command, "internal", e.what(), 1);
    }
}
