// sinklab-make-corpus: deterministic pseudo-English byte corpus generator.
// Same --seed, same --bytes => byte-identical output.

#include <CLI11.hpp>

#include <cstdio>
#include <string>

#include "sinklab/common.hpp"
#include "sinklab/textgen.hpp"

int main(int argc, char** argv) {
    CLI::App app{"deterministic pseudo-English corpus generator"};
    std::string out_path;
    uint64_t seed = 1;
    uint64_t bytes = 2u << 20;
    app.add_option("--out", out_path, "Output file")->required();
    app.add_option("--bytes", bytes, "Corpus size in bytes")->capture_default_str();
    app.add_option("--seed", seed, "Generator seed")->capture_default_str();
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    try {
        const std::string text = sinklab::generate_pseudo_text(seed, static_cast<size_t>(bytes));
        std::FILE* f = std::fopen(out_path.c_str(), "wb");
        if (!f) throw sinklab::IoError("cannot open output: " + out_path);
        const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size();
        if (std::fclose(f) != 0 || !ok) throw sinklab::IoError("write failed: " + out_path);
        std::printf("wrote %zu bytes to %s\n", text.size(), out_path.c_str());
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
