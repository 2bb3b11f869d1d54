// dgs: distributed gaussian splatting engine CLI.
//
// Subcommands: synth, partition, render, render-dist, train,
// validate-boundary, validate-equivalence, bench. Exit code 0 on success,
// 1 with a diagnostic on failure, 2 on usage errors.

#include "dgs/bench.hpp"
#include "dgs/io.hpp"
#include "dgs/manager.hpp"
#include "dgs/trainer.hpp"
#include "dgs/worker.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>

namespace {

using namespace dgs;

int depth_for_workers(int workers) {
    int depth = 0;
    while ((1 << depth) < workers) ++depth;
    if ((1 << depth) != workers)
        throw std::invalid_argument("--workers must be a power of two (subset count is 2^L)");
    return depth;
}

template <typename T>
std::vector<Splat<T>> cast_splats(const std::vector<Splat<float>>& in) {
    std::vector<Splat<T>> out;
    out.reserve(in.size());
    for (const auto& s : in) {
        Splat<T> o;
        o.id = s.id;
        o.mu = s.mu.template cast<T>();
        o.log_scale = s.log_scale.template cast<T>();
        o.rotation = s.rotation.template cast<T>();
        o.opacity_logit = T(s.opacity_logit);
        for (const auto& c : s.sh) o.sh.push_back(c.template cast<T>());
        out.push_back(std::move(o));
    }
    return out;
}

template <typename T>
std::vector<Splat<float>> to_float_splats(const std::vector<Splat<T>>& in) {
    std::vector<Splat<float>> out;
    out.reserve(in.size());
    for (const auto& s : in) {
        Splat<float> o;
        o.id = s.id;
        o.mu = s.mu.template cast<float>();
        o.log_scale = s.log_scale.template cast<float>();
        o.rotation = s.rotation.template cast<float>();
        o.opacity_logit = float(s.opacity_logit);
        for (const auto& c : s.sh) o.sh.push_back(c.template cast<float>());
        out.push_back(std::move(o));
    }
    return out;
}

template <typename T>
std::vector<Splat<T>> load_or_init_splats(const std::string& splats_path, const SceneBundle<T>& scene,
                                          std::size_t count, std::uint64_t seed, int sh_degree) {
    if (!splats_path.empty()) {
        const PlyScene ply = load_ply(splats_path);
        if (!ply.is_splats) throw std::runtime_error(splats_path + " is not a splat checkpoint");
        return cast_splats<T>(ply.splats);
    }
    if (scene.points.empty()) throw std::runtime_error("scene has no initialization point cloud");
    if (count == 0) count = scene.points.size();
    return init_from_pointcloud<T>(scene.points, scene.point_colors, count, seed, sh_degree);
}

struct CommonArgs {
    std::string scene_dir;
    std::string splats_path;
    bool oracle = false;
    std::uint64_t seed = 0;
    int sh_degree = 3;
};

RenderOptions make_options(bool oracle) { return oracle ? oracle_options() : RenderOptions{}; }

// --- synth -------------------------------------------------------------------

int cmd_synth(const std::string& out_dir, SynthSpec spec, std::uint64_t seed) {
    const auto bundle = synth_scene<float>(spec, seed);
    save_scene_dir(bundle, out_dir);
    std::printf("wrote scene: %s (%d splats, %zu views, %dx%d)\n", out_dir.c_str(), spec.count,
                bundle.cameras.size(), spec.width, spec.height);
    return 0;
}

// --- partition ---------------------------------------------------------------

int cmd_partition(const CommonArgs& args, int depth, bool grid, double cell, const std::string& out) {
    const auto scene = load_scene_dir<float>(args.scene_dir);
    const auto splats =
        load_or_init_splats<float>(args.splats_path, scene, 0, args.seed, args.sh_degree);
    std::vector<Vec3<float>> centers;
    for (const auto& s : splats) centers.push_back(s.mu);

    PartitionTable<float> table;
    if (grid) {
        Vec3<float> lo = centers[0], hi = centers[0];
        for (const auto& c : centers) {
            lo = lo.cwiseMin(c);
            hi = hi.cwiseMax(c);
        }
        table = build_fixed_grid<float>(lo, hi, Vec3<float>::Constant(float(cell)));
    } else {
        table = build_kdtree<float>(centers, depth);
    }
    assign_subsets<float>(table, splats);

    if (out.empty()) {
        dump_partition(table, std::cout);
    } else {
        std::ofstream f(out);
        if (!f) throw std::runtime_error("cannot open " + out);
        dump_partition(table, f);
    }
    std::fprintf(stderr, "%d leaves, %zu splats\n", table.subset_count(), splats.size());
    return 0;
}

// --- render / render-dist ------------------------------------------------------

template <typename T>
int run_render(const CommonArgs& args, int view, const std::string& out_path, int workers,
               bool processes) {
    const auto scene = load_scene_dir<T>(args.scene_dir);
    if (view < 0 || view >= int(scene.cameras.size()))
        throw std::runtime_error("view index out of range (scene has " +
                                 std::to_string(scene.cameras.size()) + " views)");
    const auto splats = load_or_init_splats<T>(args.splats_path, scene, 0, args.seed, args.sh_degree);
    const RenderOptions opts = make_options(args.oracle);

    RenderedImage<T> img;
    if (workers <= 1) {
        img = render_view<T>(splats, scene.cameras[view], scene.background, opts);
    } else {
        TrainConfig cfg;
        cfg.kd_depth = depth_for_workers(workers);
        Manager<T> mgr(splats, cfg, opts, processes);
        BatchTiming timing;
        img = mgr.render(scene.cameras[view], scene.background, &timing);
        std::uint64_t bytes = 0;
        for (auto b : timing.forward_map_bytes) bytes += b;
        std::fprintf(stderr, "forward map payload: %llu bytes (model %llu)\n",
                     (unsigned long long)bytes,
                     (unsigned long long)comm_model_bytes(scene.cameras[view].width,
                                                          scene.cameras[view].height, workers,
                                                          sizeof(T)));
        mgr.shutdown();
    }
    write_ppm(img.color, out_path);
    if (!scene.images.empty()) {
        const auto m = metrics(img.color, scene.images[view]);
        std::printf("view %d psnr=%.4f ssim=%.6f -> %s\n", view, m.psnr, m.ssim, out_path.c_str());
    } else {
        std::printf("view %d -> %s\n", view, out_path.c_str());
    }
    return 0;
}

// --- train ---------------------------------------------------------------------

template <typename T>
int run_train(const CommonArgs& args, TrainConfig cfg, std::size_t init_count, int holdout_every,
              bool processes, const std::string& out_ckpt, const std::string& log_path) {
    const auto scene = load_scene_dir<T>(args.scene_dir);
    auto splats = load_or_init_splats<T>(args.splats_path, scene, init_count, cfg.seed, args.sh_degree);

    std::vector<Camera<T>> train_cams, eval_cams;
    std::vector<Image<T>> train_targets, eval_targets;
    for (std::size_t v = 0; v < scene.cameras.size(); ++v) {
        const bool held_out = holdout_every > 0 && (v % std::size_t(holdout_every)) == 0;
        (held_out ? eval_cams : train_cams).push_back(scene.cameras[v]);
        (held_out ? eval_targets : train_targets).push_back(scene.images[v]);
    }
    if (train_cams.empty()) throw std::runtime_error("no training views left after holdout split");

    std::printf("training %zu splats on %zu views (%zu held out), K=%d, %llu steps\n", splats.size(),
                train_cams.size(), eval_cams.size(), 1 << cfg.kd_depth,
                (unsigned long long)cfg.iterations);

    const auto sink = [&](const TrainRecord& r) {
        std::printf("step %6llu loss %.6f psnr %6.2f lr_pos %.3e comm %llu B wall %.1f ms\n",
                    (unsigned long long)r.step, r.loss, r.psnr, r.lr_position,
                    (unsigned long long)r.comm_bytes, r.wall_ms);
        if (!log_path.empty()) append_metrics_ndjson(log_path, {&r, 1});
    };
    auto result = train<T>(std::move(splats), train_cams, train_targets, scene.background, cfg,
                           make_options(args.oracle), processes, sink);

    std::vector<Splat<T>> final_splats;
    for (auto& p : result.checkpoint) final_splats.push_back(std::move(p.splat));
    std::sort(final_splats.begin(), final_splats.end(),
              [](const auto& a, const auto& b) { return a.id < b.id; });
    if (!out_ckpt.empty()) {
        save_splats_ply(to_float_splats(final_splats), out_ckpt);
        std::printf("checkpoint: %s\n", out_ckpt.c_str());
    }
    if (!eval_cams.empty()) {
        TrainConfig eval_cfg = cfg;
        Manager<T> mgr(final_splats, eval_cfg, make_options(args.oracle), false);
        const double held_psnr = eval_psnr<T>(mgr, eval_cams, eval_targets, scene.background);
        mgr.shutdown();
        std::printf("held-out psnr: %.3f dB over %zu views\n", held_psnr, eval_cams.size());
    }
    std::printf("final loss: %.6f\n", result.final_loss);
    return 0;
}

// --- validate-boundary -----------------------------------------------------------

std::vector<Splat<double>> boundary_scene(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<Splat<double>> splats;
    SplatId id = 0;
    for (int i = 0; i < 300; ++i) {
        const double x = (i % 4 == 0) ? 0.02 + 0.05 * u01(rng) : 0.2 + 0.8 * u01(rng);
        const double y = 1.2 * u01(rng) - 0.6, z = 1.2 * u01(rng) - 0.6;
        Splat<double> s;
        const double scale = 0.05 + 0.1 * u01(rng);
        s.log_scale = Vec3<double>::Constant(std::log(scale));
        const double alpha = 0.4 + 0.5 * u01(rng);
        s.opacity_logit = std::log(alpha / (1 - alpha));
        s.sh = {Vec3<double>{(u01(rng) * 0.8 + 0.1 - 0.5) / sh::kC0,
                             (u01(rng) * 0.8 + 0.1 - 0.5) / sh::kC0,
                             (u01(rng) * 0.8 + 0.1 - 0.5) / sh::kC0}};
        s.mu = {x, y, z};
        s.id = id++;
        splats.push_back(s);
        s.mu = {-x, y, z};
        s.id = id++;
        splats.push_back(s);
    }
    return splats;
}

int cmd_validate_boundary(std::uint64_t seed, const std::string& out_dir) {
    const auto splats = boundary_scene(seed);
    std::vector<Vec3<double>> centers;
    for (const auto& s : splats) centers.push_back(s.mu);
    auto table = build_kdtree<double>(centers, 1);
    assign_subsets<double>(table, splats);

    Camera<double> cam;
    cam.width = cam.height = 96;
    cam.fx = cam.fy = 96.0;
    cam.cx = cam.cy = 48.0;
    cam.t_wc = {0, 0, 4};  // optical axis is the z line inside the dividing plane x = 0

    const auto report = boundary_validity_test<double>(splats, table, cam, oracle_options());
    auto neg_opts = oracle_options();
    neg_opts.indicator_enabled = false;
    const auto negative = boundary_validity_test<double>(splats, table, cam, neg_opts);

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        for (int k = 0; k < 2; ++k)
            write_ppm(report.partials[k].color.cast<double>(),
                      out_dir + "/partial_" + std::to_string(k) + ".ppm");
        write_ppm(report.merged.color, out_dir + "/merged.ppm");
        std::printf("images in %s\n", out_dir.c_str());
    }

    std::printf("boundary validity: %s (%zu off-side pixels checked)\n",
                report.passed ? "PASS" : "FAIL", report.checked_pixels);
    std::printf("negative control (indicator disabled): %s\n",
                !negative.passed ? "fails as expected" : "UNEXPECTEDLY PASSES");
    if (!report.passed)
        for (const auto& o : report.offenders)
            std::printf("  leak: subset %d pixel (%d,%d)\n", o[0], o[1], o[2]);
    return report.passed && !negative.passed ? 0 : 1;
}

// --- validate-equivalence ----------------------------------------------------------

template <typename T>
double equivalence_sweep(int n_scenes, int n_cams, const std::vector<int>& worker_counts,
                         std::uint64_t seed, double tolerance) {
    double worst = 0;
    for (int sc = 0; sc < n_scenes; ++sc) {
        SynthSpec spec;
        spec.count = 1000 + int((9000.0 * sc) / std::max(1, n_scenes - 1));
        spec.n_views = n_cams;
        spec.width = spec.height = 64;
        spec.clustered = sc % 2 == 1;
        const auto bundle = synth_scene<T>(spec, seed + sc);

        for (int workers : worker_counts) {
            TrainConfig cfg;
            cfg.kd_depth = depth_for_workers(workers);
            Manager<T> mgr(bundle.gt_splats, cfg, oracle_options(), false);
            for (int v = 0; v < n_cams; ++v) {
                const auto dist = mgr.render(bundle.cameras[v], bundle.background);
                const auto mono =
                    render_view<T>(bundle.gt_splats, bundle.cameras[v], bundle.background, oracle_options());
                for (std::size_t i = 0; i < mono.color.data.size(); ++i)
                    worst = std::max(worst, std::abs(double(mono.color.data[i] - dist.color.data[i])));
            }
            mgr.shutdown();
            std::printf("scene %2d (%5d splats) K=%d: max |err| so far %.3e\n", sc, spec.count,
                        workers, worst);
            if (worst > tolerance) return worst;
        }
    }
    return worst;
}

int cmd_validate_equivalence(int n_scenes, int n_cams, std::vector<int> worker_counts,
                             std::uint64_t seed, bool oracle) {
    if (worker_counts.empty()) worker_counts = {2, 4, 8};
    const double tol = oracle ? 1e-9 : 1e-4;
    const double worst = oracle
                             ? equivalence_sweep<double>(n_scenes, n_cams, worker_counts, seed, tol)
                             : equivalence_sweep<float>(n_scenes, n_cams, worker_counts, seed, tol);
    std::printf("max |distributed - monolithic| = %.3e (tolerance %.1e, %s)\n", worst, tol,
                oracle ? "f64 oracle" : "f32");
    return worst <= tol ? 0 : 1;
}

// --- bench -----------------------------------------------------------------------

int cmd_bench(const std::string& mode, int workers, int batch, bool clustered, bool processes,
              std::uint64_t seed) {
    SynthSpec spec;
    spec.count = 20000;
    spec.clustered = clustered;
    spec.n_views = 8;
    spec.width = spec.height = 96;
    const auto bundle = synth_scene<float>(spec, seed);
    std::vector<Vec3<float>> centers;
    for (const auto& s : bundle.gt_splats) centers.push_back(s.mu);

    if (mode == "balance") {
        auto kd = build_kdtree<float>(centers, depth_for_workers(workers));
        assign_subsets<float>(kd, bundle.gt_splats);
        std::printf("kd-tree:\n");
        print_balance(balance_stats<float>(kd, bundle.gt_splats), std::cout);
        const float side = float(2.0 * spec.extent / std::cbrt(double(workers)));
        auto grid = build_fixed_grid<float>(bundle.bounds_min, bundle.bounds_max,
                                            Vec3<float>::Constant(side));
        assign_subsets<float>(grid, bundle.gt_splats);
        std::printf("fixed grid (%d cells):\n", grid.subset_count());
        print_balance(balance_stats<float>(grid, bundle.gt_splats), std::cout);
        return 0;
    }
    if (mode == "comm") {
        TrainConfig cfg;
        cfg.kd_depth = depth_for_workers(workers);
        Manager<float> mgr(bundle.gt_splats, cfg, RenderOptions{}, processes);
        BatchTiming timing;
        mgr.render(bundle.cameras[0], bundle.background, &timing);
        std::uint64_t measured = 0;
        for (auto b : timing.forward_map_bytes) measured += b;
        const std::uint64_t modeled =
            comm_model_bytes(spec.width, spec.height, workers, sizeof(float));
        std::printf("forward map payload per view: measured %llu bytes, model %llu bytes (%s)\n",
                    (unsigned long long)measured, (unsigned long long)modeled,
                    measured == modeled ? "exact match" : "MISMATCH");
        mgr.shutdown();
        return measured == modeled ? 0 : 1;
    }
    if (mode == "timing") {
        TrainConfig cfg;
        cfg.kd_depth = depth_for_workers(workers);
        std::printf("monolithic:\n");
        print_timing(timing_harness<float>(nullptr, bundle.gt_splats, bundle.cameras,
                                           bundle.background, 1),
                     std::cout);
        Manager<float> mgr(bundle.gt_splats, cfg, RenderOptions{}, processes);
        for (int b : {1, 2, 4}) {
            if (b > batch) break;
            print_timing(timing_harness<float>(&mgr, bundle.gt_splats, bundle.cameras,
                                               bundle.background, b),
                         std::cout);
        }
        mgr.shutdown();
        return 0;
    }
    throw std::invalid_argument("unknown bench mode " + mode + " (balance|comm|timing)");
}

}  // namespace

int main(int argc, char** argv) {
    dgs::maybe_worker_entry(argc, argv);

    CLI::App app{"distributed gaussian splatting engine"};
    app.require_subcommand(1);

    CommonArgs common;
    int exit_code = 0;

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic scene bundle");
    std::string synth_out = "scene";
    SynthSpec spec;
    std::uint64_t synth_seed = 0;
    synth->add_option("--out", synth_out, "output scene directory");
    synth->add_option("--count", spec.count, "splat count");
    synth->add_flag("--clustered", spec.clustered, "clustered splat distribution");
    synth->add_option("--views", spec.n_views, "number of ring cameras");
    synth->add_option("--width", spec.width);
    synth->add_option("--height", spec.height);
    synth->add_option("--sh-degree", spec.sh_degree, "SH degree of generated splats");
    synth->add_option("--seed", synth_seed);
    synth->callback([&] { exit_code = cmd_synth(synth_out, spec, synth_seed); });

    // partition
    auto* part = app.add_subcommand("partition", "build and dump a partition table");
    int part_depth = 3;
    bool part_grid = false;
    double part_cell = 0.5;
    std::string part_out;
    part->add_option("--scene", common.scene_dir, "scene directory")->required();
    part->add_option("--splats", common.splats_path, "splat checkpoint (default: init from cloud)");
    part->add_option("--depth", part_depth, "KD depth L (2^L leaves)");
    part->add_flag("--grid", part_grid, "fixed-size grid instead of KD tree");
    part->add_option("--cell", part_cell, "grid cell size");
    part->add_option("--out", part_out, "dump file (default stdout)");
    part->add_option("--seed", common.seed);
    part->callback(
        [&] { exit_code = cmd_partition(common, part_depth, part_grid, part_cell, part_out); });

    // render / render-dist
    auto* render = app.add_subcommand("render", "monolithic render of one view");
    auto* rdist = app.add_subcommand("render-dist", "distributed render of one view");
    int view = 0, workers = 2;
    bool processes = false;
    std::string img_out = "render.ppm";
    for (auto* cmd : {render, rdist}) {
        cmd->add_option("--scene", common.scene_dir, "scene directory")->required();
        cmd->add_option("--splats", common.splats_path, "splat checkpoint");
        cmd->add_option("--view", view, "view index");
        cmd->add_option("--out", img_out, "output PPM");
        cmd->add_flag("--oracle", common.oracle, "f64 semantics, no early termination");
        cmd->add_option("--sh-degree", common.sh_degree);
        cmd->add_option("--seed", common.seed);
    }
    rdist->add_option("--workers", workers, "worker count (power of two)");
    rdist->add_flag("--processes", processes, "multi-process workers");
    render->callback([&] {
        exit_code = common.oracle ? run_render<double>(common, view, img_out, 1, false)
                                  : run_render<float>(common, view, img_out, 1, false);
    });
    rdist->callback([&] {
        exit_code = common.oracle ? run_render<double>(common, view, img_out, workers, processes)
                                  : run_render<float>(common, view, img_out, workers, processes);
    });

    // train
    auto* tr = app.add_subcommand("train", "optimize splats against a scene");
    TrainConfig cfg;
    std::size_t init_count = 0;
    int holdout = 8;
    int train_workers = 1;
    std::string ckpt_out = "model.ply", log_out;
    tr->add_option("--scene", common.scene_dir, "scene directory")->required();
    tr->add_option("--splats", common.splats_path, "initial checkpoint (default: init from cloud)");
    tr->add_option("--count", init_count, "initial splat count (default: cloud size)");
    tr->add_option("--iters", cfg.iterations, "training steps");
    tr->add_option("--batch", cfg.batch_size, "views per step");
    tr->add_option("--workers", train_workers, "worker count (power of two)");
    tr->add_option("--lambda", cfg.lambda_ssim, "DSSIM weight in the loss");
    tr->add_option("--repartition-interval", cfg.repartition_interval, "epochs between rebuilds");
    tr->add_flag("--grad-sync", cfg.grad_sync, "synchronize shared-splat gradients");
    tr->add_flag("--processes", processes, "multi-process workers");
    tr->add_flag("--oracle", common.oracle, "f64 oracle semantics");
    tr->add_option("--seed", cfg.seed);
    tr->add_option("--sh-degree", common.sh_degree, "SH degree for cloud init");
    tr->add_option("--holdout", holdout, "hold out every Nth view (0 = none)");
    tr->add_option("--out", ckpt_out, "output checkpoint PLY");
    tr->add_option("--log", log_out, "metric log (NDJSON)");
    tr->callback([&] {
        cfg.kd_depth = depth_for_workers(train_workers);
        exit_code = common.oracle
                        ? run_train<double>(common, cfg, init_count, holdout, processes, ckpt_out, log_out)
                        : run_train<float>(common, cfg, init_count, holdout, processes, ckpt_out, log_out);
    });

    // validate-boundary
    auto* vb = app.add_subcommand("validate-boundary", "split-camera boundary validity check");
    std::uint64_t vb_seed = 7;
    std::string vb_out;
    vb->add_option("--seed", vb_seed);
    vb->add_option("--out-dir", vb_out, "write partial/merged images here");
    vb->callback([&] { exit_code = cmd_validate_boundary(vb_seed, vb_out); });

    // validate-equivalence
    auto* ve = app.add_subcommand("validate-equivalence",
                                  "distributed vs monolithic rendering sweep");
    int ve_scenes = 5, ve_cams = 4;
    std::vector<int> ve_workers;
    std::uint64_t ve_seed = 7;
    bool ve_oracle = false;
    ve->add_option("--scenes", ve_scenes, "number of synthetic scenes");
    ve->add_option("--cameras", ve_cams, "views per scene");
    ve->add_option("--workers", ve_workers, "worker counts to test (default 2 4 8)");
    ve->add_option("--seed", ve_seed);
    ve->add_flag("--oracle", ve_oracle, "f64, tolerance 1e-9 (default f32, 1e-4)");
    ve->callback(
        [&] { exit_code = cmd_validate_equivalence(ve_scenes, ve_cams, ve_workers, ve_seed, ve_oracle); });

    // bench
    auto* bench = app.add_subcommand("bench", "balance / communication / timing measurements");
    std::string bench_mode = "balance";
    int bench_workers = 2, bench_batch = 4;
    bool bench_uniform = false;
    std::uint64_t bench_seed = 3;
    bench->add_option("--mode", bench_mode, "balance | comm | timing");
    bench->add_option("--workers", bench_workers);
    bench->add_option("--batch", bench_batch, "max batch size for timing mode");
    bench->add_flag("--uniform", bench_uniform, "uniform instead of clustered scene");
    bench->add_flag("--processes", processes);
    bench->add_option("--seed", bench_seed);
    bench->callback([&] {
        exit_code =
            cmd_bench(bench_mode, bench_workers, bench_batch, !bench_uniform, processes, bench_seed);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}
