// damd: data generation, training, inference, evaluation, analysis and
// rendering for the DAMDNet face-alignment pipeline.
//
// Exit codes: 0 ok, 1 usage/configuration, 2 data error, 3 numeric failure.

#include "damd/augmentation.hpp"
#include "damd/dataset.hpp"
#include "damd/evaluation.hpp"
#include "damd/image.hpp"
#include "damd/model_io.hpp"
#include "damd/network.hpp"
#include "damd/network_spec.hpp"
#include "damd/renderer.hpp"
#include "damd/rng.hpp"
#include "damd/training.hpp"
#include "damd/weights_io.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace damd;

namespace {

struct Globals {
    std::uint64_t seed = 0;
    std::string model;
    std::string weights;
    std::string out;
};

struct NetFlags {
    double width = 0.125;
    std::string variant = "DAMDNet";
};

void require_file(const std::string& path, const char* what)
{
    if (path.empty())
        throw ConfigError(std::string("missing --") + what);
    if (!fs::exists(path))
        throw DataError(std::string(what) + " file '" + path + "' does not exist");
}

void require_out(const std::string& out)
{
    if (out.empty())
        throw ConfigError("missing --out");
}

void ensure_parent(const fs::path& p)
{
    if (p.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(p.parent_path(), ec);
        if (ec)
            throw DataError("cannot create directory '" + p.parent_path().string() + "': " + ec.message());
    }
}

void ensure_dir(const fs::path& p)
{
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec)
        throw DataError("cannot create directory '" + p.string() + "': " + ec.message());
}

std::string image_name(std::size_t i)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu.ppm", i);
    return buf;
}

DamdNet<float> load_net(const Globals& g, const NetFlags& nf)
{
    require_file(g.weights, "weights");
    DamdNet<float> net(build_variant(parse_variant(nf.variant), nf.width, kCropSize), 0);
    net.load_records(read_weights(g.weights), true);
    return net;
}

// Side-by-side panel: input with landmarks | mean-texture reconstruction over the input.
Image figure_panel(const Image& source, const MorphableModel& model, const ParamVector& source_params,
                   const std::vector<double>& landmarks, const std::vector<bool>& visibility)
{
    Image left = source;
    overlay_landmarks(left, landmarks, visibility);
    const Image right = render_model(model, source_params, source.width, source.height, &source).color;
    Image panel(2 * source.width, source.height);
    for (std::size_t y = 0; y < source.height; ++y)
        for (std::size_t x = 0; x < source.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                panel.at(x, y, c) = left.at(x, y, c);
                panel.at(source.width + x, y, c) = right.at(x, y, c);
            }
    return panel;
}

// ---------------------------------------------------------------------------

void cmd_gen_model(const Globals& g, std::size_t vertices)
{
    require_out(g.out);
    const auto model = generate_synthetic_model(SeedSplitter(g.seed).seed("model-gen"), vertices);
    ensure_parent(g.out);
    write_model(g.out, model);
    std::cout << "wrote model with " << model.num_vertices << " vertices, " << model.triangles.size()
              << " triangles to " << g.out << "\n";
}

void cmd_gen_data(const Globals& g, std::size_t count, const VirtualSampleOptions& opt)
{
    require_file(g.model, "model");
    require_out(g.out);
    if (count == 0)
        throw ConfigError("--count must be positive");
    const auto model = read_model(g.model);
    const SeedSplitter seeds(g.seed);
    const fs::path dir(g.out);
    ensure_dir(dir / "images");
    std::vector<DatasetEntry> entries;
    for (std::size_t i = 0; i < count; ++i) {
        const auto s = synthesize_virtual_sample(model, seeds.seed("data-gen", i), opt);
        if (label_inconsistency(s, model) > 1e-3)
            throw NumericError("generated sample " + std::to_string(i) + " has inconsistent labels");
        const std::string rel = "images/" + image_name(i);
        write_ppm(dir / rel, s.image);
        entries.push_back(entry_from_sample(s, rel));
    }
    write_dataset(dir / "annotations.jsonl", entries);
    std::cout << "wrote " << count << " samples to " << (dir / "annotations.jsonl").string() << "\n";
}

int cmd_train(const Globals& g, const std::string& data, TrainConfig cfg, const NetFlags& nf, std::string log_path)
{
    require_file(g.model, "model");
    require_file(data, "data");
    require_out(g.out);
    cfg.seed = g.seed;
    cfg.width = nf.width;
    cfg.variant = parse_variant(nf.variant);
    cfg.validate();
    const auto model = read_model(g.model);
    const auto samples = load_training_samples(data);
    if (log_path.empty())
        log_path = fs::path(g.out).replace_extension(".loss.csv").string();
    const std::size_t steps_per_epoch = (samples.size() + cfg.batch - 1) / cfg.batch;
    std::cout << "training " << nf.variant << " (width " << nf.width << ") on " << samples.size() << " samples, "
              << cfg.epochs << " epochs x " << steps_per_epoch << " steps\n";
    const auto result = train(model, samples, cfg, [&](const StepLog& r) {
        if (r.step % steps_per_epoch == 0 && r.epoch % std::max<std::size_t>(1, cfg.epochs / 20) == 0)
            std::cout << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.loss << "\n";
    });
    ensure_parent(g.out);
    ensure_parent(log_path);
    save_network(g.out, result.net);
    detail::write_text(log_path, format_loss_csv(result.log));
    if (result.diverged) {
        std::cerr << "error: " << result.message << "; wrote last good weights to " << g.out << "\n";
        return 3;
    }
    std::cout << "final loss " << result.log.back().loss << " (initial " << result.log.front().loss << "); wrote "
              << g.out << " and " << log_path << "\n";
    return 0;
}

struct FitInput {
    std::string image_path;
    std::optional<BBox> bbox;
};

std::vector<FitInput> read_fit_inputs(const fs::path& path)
{
    std::vector<FitInput> out;
    detail::for_each_json_line(detail::read_text(path), path.string(), [&](const nlohmann::json& obj, std::size_t line) {
        FitInput in;
        in.image_path = detail::parse_path(obj, path.string(), line);
        if (obj.contains("bbox") && !obj["bbox"].is_null()) {
            const auto& b = obj["bbox"];
            if (!b.is_array() || b.size() != 4)
                detail::schema_error(path.string(), line, "'bbox' must be [x, y, w, h]");
            in.bbox = BBox{detail::finite_number(b[0], path.string(), line, "bbox"),
                           detail::finite_number(b[1], path.string(), line, "bbox"),
                           detail::finite_number(b[2], path.string(), line, "bbox"),
                           detail::finite_number(b[3], path.string(), line, "bbox")};
        }
        out.push_back(in);
    });
    return out;
}

void cmd_fit(const Globals& g, const NetFlags& nf, const std::string& data, const std::string& render_dir)
{
    require_file(g.model, "model");
    require_file(data, "data");
    require_out(g.out);
    const auto model = read_model(g.model);
    auto net = load_net(g, nf);
    const auto inputs = read_fit_inputs(data);

    std::vector<std::size_t> kept;
    std::vector<FaceCrop> crops;
    std::map<std::string, Image> sources;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto& in = inputs[i];
        if (!in.bbox) {
            std::cerr << "warning: '" << in.image_path << "' has no bbox, skipped\n";
            continue;
        }
        auto it = sources.find(in.image_path);
        if (it == sources.end())
            it = sources.emplace(in.image_path, read_ppm(resolve_image(data, in.image_path))).first;
        crops.push_back(crop_face(it->second, *in.bbox));
        kept.push_back(i);
    }
    std::vector<const Image*> images;
    for (const auto& c : crops)
        images.push_back(&c.image);
    const auto params = predict_params(net, images);

    std::vector<PredictionEntry> preds;
    if (!render_dir.empty())
        ensure_dir(render_dir);
    for (std::size_t k = 0; k < kept.size(); ++k) {
        const auto& in = inputs[kept[k]];
        preds.push_back({in.image_path, landmarks_in_source(model, params[k], crops[k].affine)});
        if (!render_dir.empty()) {
            const auto src_params = params_to_source(params[k], crops[k].affine);
            const auto panel = figure_panel(sources.at(in.image_path), model, src_params, preds.back().landmarks,
                                            landmark_visibility(model, src_params));
            write_ppm(fs::path(render_dir) / image_name(kept[k]), panel);
        }
    }
    ensure_parent(g.out);
    write_predictions(g.out, preds);
    std::cout << "wrote " << preds.size() << " predictions (" << inputs.size() - preds.size() << " skipped) to "
              << g.out << "\n";
}

void cmd_eval(const Globals& g, const std::string& data, const std::string& predictions, const std::string& ced_path,
              const std::string& method)
{
    require_file(data, "data");
    require_file(predictions, "predictions");
    const auto samples = match_predictions(read_dataset(data), read_predictions(predictions));
    const auto report = yaw_bin_report(samples);
    std::cout << format_table(report, method);
    std::cout << "overall NME " << report.overall << "% over " << samples.size() << " samples\n";
    if (!g.out.empty()) {
        ensure_parent(g.out);
        auto j = to_json(report);
        j["method"] = method;
        detail::write_text(g.out, j.dump(2) + "\n");
    }
    if (!ced_path.empty()) {
        ensure_parent(ced_path);
        detail::write_text(ced_path, format_ced_csv(ced_curve(samples, default_ced_thresholds())));
    }
}

void cmd_analyze(const Globals& g, double width, std::size_t resolution)
{
    nlohmann::json rows = nlohmann::json::array();
    std::ostringstream table;
    char line[128];
    std::snprintf(line, sizeof line, "%-14s %10s %10s\n", "Method", "GFLOPs", "Params(M)");
    table << line;
    for (const auto& spec : analyzer_specs(width)) {
        const double gflops = count_gflops(spec, resolution);
        const double params = static_cast<double>(count_params(spec)) / 1e6;
        std::snprintf(line, sizeof line, "%-14s %10.3f %10.3f\n", spec.name.c_str(), gflops, params);
        table << line;
        rows.push_back({{"method", spec.name},
                        {"gflops", gflops},
                        {"params", count_params(spec)},
                        {"flops", count_flops(spec, resolution)}});
    }
    std::cout << table.str();
    if (!g.out.empty()) {
        ensure_parent(g.out);
        detail::write_text(g.out, nlohmann::json{{"resolution", resolution}, {"width", width}, {"rows", rows}}.dump(2) +
                                      "\n");
    }
}

void cmd_render(const Globals& g, const NetFlags& nf, const std::string& data)
{
    require_file(g.model, "model");
    require_file(data, "data");
    require_out(g.out);
    const auto model = read_model(g.model);
    const auto entries = read_dataset(data);
    std::optional<DamdNet<float>> net;
    if (!g.weights.empty())
        net = load_net(g, nf);
    ensure_dir(g.out);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        const Image source = read_ppm(resolve_image(data, e.image_path));
        const FaceCrop crop = crop_face(source, e.bbox);
        ParamVector p;
        if (net) {
            p = predict_params(*net, {&crop.image}).front();
        } else if (e.params) {
            p = *e.params;
        } else {
            throw DataError(data + ": entry " + std::to_string(i + 1) + " has no params and no --weights were given");
        }
        const auto src = params_to_source(p, crop.affine);
        write_ppm(fs::path(g.out) / image_name(i),
                  figure_panel(source, model, src, project_landmarks(model, src), landmark_visibility(model, src)));
    }
    std::cout << "wrote " << entries.size() << " renders to " << g.out << "\n";
}

void cmd_augment(const Globals& g, const std::string& data, const std::vector<double>& deltas)
{
    require_file(g.model, "model");
    require_file(data, "data");
    require_out(g.out);
    if (deltas.empty())
        throw ConfigError("--deltas must list at least one angle");
    for (double d : deltas)
        if (!(d > 0.0 && d <= 90.0))
            throw ConfigError("--deltas entries must be in (0, 90]");
    const auto model = read_model(g.model);
    const auto entries = read_dataset(data);
    const fs::path dir(g.out);
    ensure_dir(dir / "images");
    std::vector<DatasetEntry> out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (!e.params)
            throw DataError(data + ": entry " + std::to_string(i + 1) + " has no params to rotate");
        const Image source = read_ppm(resolve_image(data, e.image_path));
        FaceCrop crop = crop_face(source, e.bbox);
        const std::string rel = "images/" + image_name(i);
        write_ppm(dir / rel, crop.image);
        TrainingSample s;
        s.image = std::move(crop.image);
        s.bbox = full_frame_bbox();
        s.params = *e.params;
        relabel(s, model);
        out.push_back(entry_from_sample(s, rel));
        for (double d : deltas) {
            // turn further toward profile
            const double signed_delta = s.yaw_deg >= 0.0 ? d : -d;
            if (std::abs(s.yaw_deg + signed_delta) > 90.0)
                continue;
            const auto r = rotate_profile(s, model, signed_delta);
            out.push_back(entry_from_sample(r, rel));
        }
    }
    write_dataset(dir / "annotations.jsonl", out);
    std::cout << "wrote " << out.size() << " samples (" << entries.size() << " originals) to "
              << (dir / "annotations.jsonl").string() << "\n";
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"DAMDNet face alignment toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "master random seed")->capture_default_str();
    app.add_option("--model", g.model, "3DMM model file (DAMD3DMM)");
    app.add_option("--weights", g.weights, "network weights file (DAMDWTS1)");
    app.add_option("--out", g.out, "output file or directory");

    NetFlags nf;
    auto add_net_flags = [&nf](CLI::App* sub) {
        sub->add_option("--width", nf.width, "width multiplier")->capture_default_str();
        sub->add_option("--variant", nf.variant, "MDNet, AMDNet or DAMDNet")->capture_default_str();
    };

    std::size_t vertices = 1000;
    auto* gen_model = app.add_subcommand("gen-model", "generate a synthetic 3DMM");
    gen_model->add_option("--vertices", vertices, "vertex count (>= 68)")->capture_default_str();

    std::size_t count = 16;
    VirtualSampleOptions vopt;
    auto* gen_data = app.add_subcommand("gen-data", "render a synthetic dataset (PPM + JSONL)");
    gen_data->add_option("--count", count, "number of samples")->capture_default_str();
    gen_data->add_option("--max-yaw", vopt.max_yaw_deg, "yaw range in degrees")->capture_default_str();

    std::string data;
    TrainConfig tcfg;
    std::string milestones;
    std::string log_path;
    auto* train_cmd = app.add_subcommand("train", "train the network");
    train_cmd->add_option("--data", data, "annotations JSONL with params")->required();
    train_cmd->add_option("--lr", tcfg.lr, "initial learning rate")->capture_default_str();
    train_cmd->add_option("--batch", tcfg.batch, "batch size")->capture_default_str();
    train_cmd->add_option("--epochs", tcfg.epochs, "epochs")->capture_default_str();
    train_cmd->add_option("--milestones", milestones, "comma-separated epochs (default 15,25,30 scaled to --epochs)");
    train_cmd->add_option("--lr-factor", tcfg.lr_factor, "decay factor at each milestone")->capture_default_str();
    train_cmd->add_option("--omega", tcfg.wing.omega, "wing loss omega")->capture_default_str();
    train_cmd->add_option("--epsilon", tcfg.wing.epsilon, "wing loss epsilon")->capture_default_str();
    train_cmd->add_option("--lambda1", tcfg.loss.lambda1, "WPDC weight")->capture_default_str();
    train_cmd->add_option("--lambda2", tcfg.loss.lambda2, "wing weight")->capture_default_str();
    train_cmd->add_option("--log", log_path, "loss CSV (default <out>.loss.csv)");
    add_net_flags(train_cmd);

    std::string render_dir;
    auto* fit_cmd = app.add_subcommand("fit", "predict landmarks for images with bboxes");
    fit_cmd->add_option("--data", data, "JSONL with image_path and bbox")->required();
    fit_cmd->add_option("--render", render_dir, "directory for reconstruction renders");
    add_net_flags(fit_cmd);

    std::string predictions, ced_path, method = "DAMDNet";
    auto* eval_cmd = app.add_subcommand("eval", "NME report and CED curve");
    eval_cmd->add_option("--data", data, "ground-truth JSONL")->required();
    eval_cmd->add_option("--predictions", predictions, "predictions JSONL")->required();
    eval_cmd->add_option("--ced", ced_path, "CED CSV output");
    eval_cmd->add_option("--method", method, "row label in the report table")->capture_default_str();

    double analyze_width = 1.0;
    std::size_t resolution = 120;
    auto* analyze_cmd = app.add_subcommand("analyze", "parameter and GFLOP counts");
    analyze_cmd->add_option("--width", analyze_width, "width multiplier for our variants")->capture_default_str();
    analyze_cmd->add_option("--resolution", resolution, "input resolution")->capture_default_str();

    auto* render_cmd = app.add_subcommand("render", "reconstruction renders from labels or a network");
    render_cmd->add_option("--data", data, "annotations JSONL")->required();
    add_net_flags(render_cmd);

    std::vector<double> deltas{30.0, 60.0};
    auto* augment_cmd = app.add_subcommand("augment", "add yaw-rotated copies of labelled samples");
    augment_cmd->add_option("--data", data, "annotations JSONL with params")->required();
    augment_cmd->add_option("--deltas", deltas, "extra yaw angles in degrees")->delimiter(',')->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen_model) {
            cmd_gen_model(g, vertices);
        } else if (*gen_data) {
            cmd_gen_data(g, count, vopt);
        } else if (*train_cmd) {
            if (!milestones.empty()) {
                std::stringstream ss(milestones);
                std::string item;
                while (std::getline(ss, item, ','))
                    tcfg.milestones.push_back(static_cast<std::size_t>(std::stoul(item)));
            }
            return cmd_train(g, data, tcfg, nf, log_path);
        } else if (*fit_cmd) {
            cmd_fit(g, nf, data, render_dir);
        } else if (*eval_cmd) {
            cmd_eval(g, data, predictions, ced_path, method);
        } else if (*analyze_cmd) {
            cmd_analyze(g, analyze_width, resolution);
        } else if (*render_cmd) {
            cmd_render(g, nf, data);
        } else if (*augment_cmd) {
            cmd_augment(g, data, deltas);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: bad number in --milestones\n";
        return 1;
    }
    return 0;
}
