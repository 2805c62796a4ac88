// carmtwin command line: protocol parsing, the HTTP service, scripted
// sessions, evaluation studies and phantom export.

#include "carmtwin/carmtwin.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace carmtwin;

namespace {

std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::not_found, "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

PhantomEntry load_entry(const std::string& phantom, const std::string& vocabulary)
{
    if (phantom.empty() && vocabulary.empty()) return default_phantom();
    std::shared_ptr<const LabeledVolume> volume;
    if (phantom.empty()) volume = default_phantom().volume;
    else if (phantom.ends_with(".json")) volume = std::make_shared<const LabeledVolume>(build_synthetic_phantom(parse_phantom_spec(read_file(phantom))));
    else volume = std::make_shared<const LabeledVolume>(load_phantom(phantom));
    const std::string voc = vocabulary.empty() ? std::string(assets::vocabulary) : read_file(vocabulary);
    return {volume, std::make_shared<const PromptVocabulary>(parse_vocabulary(voc, *volume))};
}

struct CorruptionOpts {
    std::string preset = "identity";
    double blur = -1.0;
    int dilate = 0;
    bool dilate_set = false;
    double dropout = -1.0;
    std::uint64_t seed = 0;

    void add(CLI::App* app)
    {
        app->add_option("--corruption", preset, "identity or stylized")->check(CLI::IsMember({"identity", "stylized"}));
        app->add_option("--blur", blur, "Gaussian blur sigma (px)");
        app->add_option("--dilate", dilate, "dilate (>0) or erode (<0) radius (px)")->each([this](const std::string&) { dilate_set = true; });
        app->add_option("--dropout", dropout, "dropout probability");
        app->add_option("--seed", seed, "corruption seed");
    }

    CorruptionConfig build() const
    {
        CorruptionConfig c = preset == "stylized" ? CorruptionConfig::stylized(seed) : CorruptionConfig::identity();
        c.seed = seed;
        if (blur >= 0.0) c.blur_sigma_px = blur;
        if (dilate_set) c.dilate_erode_px = dilate;
        if (dropout >= 0.0) c.dropout_prob = dropout;
        c.validate();
        return c;
    }
};

void write_to(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::configuration, "cannot write '" + path.string() + "'");
    out << text;
}

int cmd_parse()
{
    int bad = 0;
    std::string line;
    while (std::getline(std::cin, line)) {
        if (line.empty()) continue;
        try {
            std::cout << serialize_action(parse_action(line)) << '\n';
        } catch (const ParseError& e) {
            std::cout << "error: " << e.what() << '\n';
            ++bad;
        }
    }
    return bad ? 1 : 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Digital-twin simulator for a language-promptable C-arm"};
    app.require_subcommand(1);

    auto* parse = app.add_subcommand("parse", "Parse action lines from stdin and print canonical forms");

    std::string phantom, vocabulary;
    auto add_phantom = [&](CLI::App* a) {
        a->add_option("--phantom", phantom, "phantom spec (.json) or saved volume; default: built-in torso");
        a->add_option("--vocabulary", vocabulary, "prompt vocabulary file; default: built-in");
    };

    auto* serve = app.add_subcommand("serve", "Run the HTTP service");
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string adapter = "fallback", llm_endpoint, seg_endpoint;
    bool no_gating = false;
    CorruptionOpts serve_corruption;
    add_phantom(serve);
    serve->add_option("--host", host);
    serve->add_option("--port", port);
    serve->add_option("--adapter", adapter, "fallback or llm")->check(CLI::IsMember({"fallback", "llm"}));
    serve->add_option("--llm-endpoint", llm_endpoint, "http://host:port of the language model");
    serve->add_option("--segmentation-endpoint", seg_endpoint, "use an external segmentation model");
    serve->add_flag("--no-radiation-gating", no_gating, "shoot without confirmation");
    serve_corruption.add(serve);

    auto* script = app.add_subcommand("script", "Run an utterance script through one session");
    std::string script_path, transcript_out;
    bool auto_confirm = false;
    CorruptionOpts script_corruption;
    add_phantom(script);
    script->add_option("file", script_path, "one utterance per line; default: built-in demo");
    script->add_flag("--auto-confirm", auto_confirm, "confirm every staged motion");
    script->add_option("-o,--out", transcript_out, "transcript file (JSON lines); default: stdout");
    script_corruption.add(script);

    auto* eval = app.add_subcommand("eval", "Evaluation studies");
    eval->require_subcommand(1);
    std::string views_path, prompts_path, out_dir = "results";
    CorruptionOpts eval_corruption;
    SubsetStudyParams subset_params;
    DegradationParams sweep_params;
    auto add_eval = [&](CLI::App* a) {
        add_phantom(a);
        a->add_option("--views", views_path, "view list")->required();
        a->add_option("--prompts", prompts_path, "prompt list")->required();
        a->add_option("--out", out_dir, "output directory");
    };
    auto* single = eval->add_subcommand("single-image", "Per-image DICE and 2D centroid error");
    add_eval(single);
    eval_corruption.add(single);
    auto* subsets = eval->add_subcommand("subsets", "Reconstruction over random view subsets");
    add_eval(subsets);
    eval_corruption.add(subsets);
    subsets->add_option("--n-min", subset_params.n_min);
    subsets->add_option("--n-max", subset_params.n_max);
    subsets->add_option("--dice-floor", subset_params.dice_floor);
    subsets->add_option("--draws", subset_params.draws_per_primary);
    subsets->add_option("--subset-seed", subset_params.seed);
    auto* sweep = eval->add_subcommand("sweep", "Blur sweep of reconstruction quality");
    add_eval(sweep);
    sweep->add_option("--blur", sweep_params.blur_levels, "blur levels (px)");
    sweep->add_option("--seeds", sweep_params.seeds);
    sweep->add_option("--dropout", sweep_params.dropout_prob);

    auto* build = app.add_subcommand("phantom", "Build a phantom from a spec and save the volume");
    std::string spec_path, volume_out;
    build->add_option("--spec", spec_path, "phantom spec; default: built-in torso");
    build->add_option("-o,--out", volume_out, "output volume")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*parse) return cmd_parse();

        if (*serve) {
            ServiceContext ctx;
            ctx.phantoms.emplace("default", load_entry(phantom, vocabulary));
            ctx.instruction = std::string(assets::instruction);
            ctx.corruption = serve_corruption.build();
            ctx.session.radiation_gating = !no_gating;
            if (adapter == "llm") {
                if (llm_endpoint.empty()) throw Error(ErrorCode::configuration, "--adapter llm needs --llm-endpoint");
                ctx.adapter = {{"type", "llm"}, {"endpoint", llm_endpoint}};
            }
            if (!seg_endpoint.empty()) ctx.segmentation = {{"type", "external"}, {"endpoint", seg_endpoint}};
            Service service(std::move(ctx));
            httplib::Server srv;
            service.mount(srv);
            std::cerr << "listening on " << host << ":" << port << '\n';
            if (!srv.listen(host, port)) throw Error(ErrorCode::unavailable, "cannot listen on " + host + ":" + std::to_string(port));
            return 0;
        }

        if (*script) {
            const PhantomEntry e = load_entry(phantom, vocabulary);
            auto seg = std::make_shared<OracleSegmentation>(e.volume, e.vocabulary, script_corruption.build());
            Session session(e.volume, e.vocabulary, seg, RuleBasedFallback{});
            const auto lines = parse_script(script_path.empty() ? std::string(assets::demo_script) : read_file(script_path));
            const SessionTranscript t = run_session_script(lines, session, auto_confirm);
            std::ostringstream os;
            write_transcript(t, os, session.last_reconstruction());
            if (transcript_out.empty()) std::cout << os.str();
            else write_to(transcript_out, os.str());
            std::cerr << t.succeeded() << "/" << t.entries.size() << " steps succeeded\n";
            return t.succeeded() == t.entries.size() ? 0 : 1;
        }

        if (*eval) {
            const PhantomEntry e = load_entry(phantom, vocabulary);
            const auto views = parse_views(read_file(views_path));
            const auto prompts = parse_prompt_list(read_file(prompts_path));
            const auto images = render_views(*e.volume, views);
            std::ostringstream samples, summary;
            if (*single) {
                const auto s = run_single_image_study(*e.volume, *e.vocabulary, images, prompts, eval_corruption.build());
                write_single_image_samples(s, samples);
                write_summary(s.rows, summary);
                write_to(fs::path(out_dir) / "single_image_samples.csv", samples.str());
                write_to(fs::path(out_dir) / "single_image_summary.csv", summary.str());
            } else if (*subsets) {
                const auto s = run_subset_study(*e.volume, *e.vocabulary, images, prompts, eval_corruption.build(), subset_params);
                write_subset_samples(s, samples);
                write_summary(s.rows, summary);
                write_to(fs::path(out_dir) / "subset_samples.csv", samples.str());
                write_to(fs::path(out_dir) / "subset_summary.csv", summary.str());
            } else {
                const auto levels = run_degradation_sweep(*e.volume, *e.vocabulary, images, prompts, sweep_params);
                write_degradation(levels, summary);
                write_to(fs::path(out_dir) / "degradation.csv", summary.str());
            }
            std::cerr << "wrote results to " << out_dir << '\n';
            return 0;
        }

        if (*build) {
            std::vector<std::string> warnings;
            const auto spec = parse_phantom_spec(spec_path.empty() ? std::string(assets::torso_phantom) : read_file(spec_path));
            const LabeledVolume v = build_synthetic_phantom(spec, &warnings);
            for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
            save_phantom(v, volume_out);
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
