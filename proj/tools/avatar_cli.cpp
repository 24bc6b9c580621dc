#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "avatar/checkpoint.hpp"
#include "avatar/dataset.hpp"
#include "avatar/gradcheck.hpp"
#include "avatar/optimizer.hpp"
#include "avatar/renderer.hpp"
#include "avatar/synth.hpp"

namespace {

using namespace avatar;

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::invalid_argument("invalid JSON in '" + path + "'");
  return j;
}

TrainConfig config_from_meta(const nlohmann::json& meta) {
  if (meta.contains("config")) return TrainConfig::from_json(meta.at("config"));
  TrainConfig cfg;
  cfg.preset = meta.value("preset", "body");
  cfg.apply_preset();
  return cfg;
}

struct RenderSetup {
  Checkpoint ckpt;
  TrainConfig cfg;
  CanonicalContext canon;
  bool residual_active = false;
};

RenderSetup load_render_setup(const std::string& ckpt_path) {
  RenderSetup rs;
  rs.ckpt = load_checkpoint(ckpt_path);
  rs.cfg = config_from_meta(rs.ckpt.meta);
  rs.canon = build_canonical_context(rs.ckpt.model);
  rs.residual_active = rs.ckpt.meta.value("stage", 1) >= 2;
  return rs;
}

FrameRender render_with(const RenderSetup& rs, const AvatarParams& avatar,
                        const FrameParams& fp, const CanonicalField& field,
                        const DeformationField* residual) {
  const PosedMesh mesh = pose_mesh(rs.ckpt.model, avatar, fp, rs.canon);
  Bvh bvh;
  bvh.build(mesh.vertices, rs.ckpt.model.faces);
  const NeighborIndex index(mesh.vertices);
  PosedScene scene;
  scene.model = &rs.ckpt.model;
  scene.mesh = &mesh;
  scene.bvh = &bvh;
  scene.neighbors = &index;
  scene.albedo = &avatar.albedo;
  scene.skin = SkinningConfig{rs.cfg.sigma, rs.cfg.k};
  scene.residual = residual;
  RenderOptions opts;
  opts.n_bins = rs.cfg.n_bins;
  opts.jitter = false;
  return render_frame(scene, field, fp.camera, rs.cfg.bounds, opts, true);
}

FrameParams frame_from_pose_json(const RenderSetup& rs, const nlohmann::json& pose) {
  FrameParams fp = rs.ckpt.frames.empty() ? FrameParams{} : rs.ckpt.frames[0];
  if (fp.theta.size() == 0) {
    fp.theta = VecX::Zero(rs.ckpt.model.pose_dim());
    fp.psi = VecX::Zero(rs.ckpt.model.expr_dim());
    fp.camera.width = rs.ckpt.meta.value("camera", nlohmann::json::object()).value("width", 64);
    fp.camera.height = rs.ckpt.meta.value("camera", nlohmann::json::object()).value("height", 64);
  }
  if (pose.contains("theta")) {
    const auto v = pose.at("theta").get<std::vector<double>>();
    if (static_cast<int>(v.size()) != rs.ckpt.model.pose_dim())
      throw std::invalid_argument("pose JSON: theta size mismatch");
    fp.theta = Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  if (pose.contains("psi")) {
    const auto v = pose.at("psi").get<std::vector<double>>();
    if (static_cast<int>(v.size()) != rs.ckpt.model.expr_dim())
      throw std::invalid_argument("pose JSON: psi size mismatch");
    fp.psi = Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  if (pose.contains("camera")) {
    const auto& c = pose.at("camera");
    fp.camera.scale = c.value("scale", fp.camera.scale);
    fp.camera.translation[0] = c.value("tx", fp.camera.translation[0]);
    fp.camera.translation[1] = c.value("ty", fp.camera.translation[1]);
  }
  return fp;
}

int run(int argc, char** argv) {
  CLI::App app{"hybrid mesh + radiance-field avatar toolkit"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP thread count (0 = default)");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic toy dataset");
  std::string synth_spec, synth_out;
  uint64_t synth_seed = 0;
  bool synth_has_seed = false;
  synth->add_option("--spec", synth_spec, "scene spec JSON (omit for the built-in scene)");
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--seed", synth_seed, "override the spec seed")->each([&](const std::string&) {
    synth_has_seed = true;
  });

  // train
  auto* train_cmd = app.add_subcommand("train", "optimize an avatar on a dataset");
  std::string train_data, train_config, train_out, train_resume;
  uint64_t train_seed = 0;
  bool train_has_seed = false;
  train_cmd->add_option("--data", train_data, "dataset directory")->required();
  train_cmd->add_option("--config", train_config, "train config JSON");
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--resume", train_resume, "checkpoint to resume from");
  train_cmd->add_option("--seed", train_seed, "override config seed")->each([&](const std::string&) {
    train_has_seed = true;
  });

  // render
  auto* render_cmd = app.add_subcommand("render", "render a frame from a checkpoint");
  std::string render_ckpt, render_pose, render_out, render_raw;
  int render_frame_id = -1;
  render_cmd->add_option("--ckpt", render_ckpt, "checkpoint path")->required();
  render_cmd->add_option("--frame", render_frame_id, "stored frame index");
  render_cmd->add_option("--pose", render_pose, "pose JSON file (theta/psi/camera)");
  render_cmd->add_option("--out", render_out, "output PNG")->required();
  render_cmd->add_option("--raw", render_raw, "optional raw float32 dump path");

  // transfer
  auto* transfer_cmd = app.add_subcommand("transfer", "render body A with exterior B");
  std::string tr_body, tr_ext, tr_out;
  transfer_cmd->add_option("--body", tr_body, "checkpoint providing the body")->required();
  transfer_cmd->add_option("--exterior", tr_ext, "checkpoint providing clothing/hair")->required();
  transfer_cmd->add_option("--out", tr_out, "output directory")->required();

  // reshape
  auto* reshape_cmd = app.add_subcommand("reshape", "re-render with modified shape");
  std::string rs_ckpt, rs_beta, rs_out;
  int rs_frame = 0;
  reshape_cmd->add_option("--ckpt", rs_ckpt, "checkpoint path")->required();
  reshape_cmd->add_option("--beta", rs_beta, "JSON array of shape coefficients")->required();
  reshape_cmd->add_option("--out", rs_out, "output PNG")->required();
  reshape_cmd->add_option("--frame", rs_frame, "stored frame index");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::string gc_ckpt;
  int gc_samples = 20;
  double gc_tol = 1e-3;
  grad_cmd->add_option("--ckpt", gc_ckpt, "checkpoint path")->required();
  grad_cmd->add_option("--samples", gc_samples, "number of configurations");
  grad_cmd->add_option("--tol", gc_tol, "relative error tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#endif

  if (synth->parsed()) {
    SceneSpec spec;
    if (!synth_spec.empty()) spec = SceneSpec::from_json(read_json_file(synth_spec));
    if (synth_has_seed) spec.seed = synth_seed;
    const ParametricModel model = make_toy_model();
    const Dataset ds = generate(model, spec);
    write_dataset(synth_out, ds);
    std::cout << "wrote " << ds.frames.size() << " frames to " << synth_out << "\n";
    return 0;
  }

  if (train_cmd->parsed()) {
    const Dataset ds = read_dataset(train_data);
    TrainConfig cfg;
    if (!train_config.empty())
      cfg = TrainConfig::from_json(read_json_file(train_config));
    if (train_has_seed) cfg.seed = train_seed;
    const ParametricModel model = make_toy_model();
    std::filesystem::create_directories(train_out);

    TrainState resume_state;
    const TrainState* resume = nullptr;
    if (!train_resume.empty()) {
      const Checkpoint ck = load_checkpoint(train_resume);
      resume_state = init_train_state(model, ds, cfg);
      resume_state.avatar = ck.avatar;
      resume_state.frames = ck.frames;
      resume_state.step = ck.meta.value("step", 0);
      resume_state.stage = ck.meta.value("stage", 1);
      resume = &resume_state;
    }

    const TrainResult result = train(model, ds, cfg, train_out + "/metrics.jsonl",
                                     train_out + "/checkpoint.ckpt", resume);

    std::vector<int> train_ids, holdout_ids;
    split_frames(ds, cfg, &train_ids, &holdout_ids);
    if (!holdout_ids.empty()) {
      const CanonicalContext canon = build_canonical_context(model);
      std::vector<FrameParams> true_params;
      for (const FrameData& f : ds.frames) true_params.push_back(f.params);
      const auto metrics = evaluate(model, canon, result.state.avatar, true_params, ds,
                                    holdout_ids, cfg, result.state.stage >= 2);
      const FrameMetrics m = mean_metrics(metrics);
      std::cout << "held-out: psnr=" << m.psnr << " ssim=" << m.ssim << " l1=" << m.l1
                << " iou_ext=" << m.iou_exterior << " iou_sil=" << m.iou_silhouette << "\n";
    }
    std::cout << "checkpoint: " << train_out << "/checkpoint.ckpt\n";
    return 0;
  }

  if (render_cmd->parsed()) {
    const RenderSetup rs = load_render_setup(render_ckpt);
    FrameParams fp;
    if (!render_pose.empty()) {
      fp = frame_from_pose_json(rs, read_json_file(render_pose));
    } else {
      const int f = render_frame_id < 0 ? 0 : render_frame_id;
      if (f >= static_cast<int>(rs.ckpt.frames.size()))
        throw std::invalid_argument("render: frame index out of range");
      fp = rs.ckpt.frames[static_cast<size_t>(f)];
    }
    const FrameRender fr =
        render_with(rs, rs.ckpt.avatar, fp, rs.ckpt.avatar.field,
                    rs.residual_active ? &rs.ckpt.avatar.residual_field : nullptr);
    write_png(render_out, fr.rgb);
    if (!render_raw.empty())
      write_raw_dump(render_raw, {{"rgb", &fr.rgb},
                                  {"s_v", &fr.s_v},
                                  {"silhouette", &fr.silhouette},
                                  {"mesh_rgb", &fr.mesh_rgb}});
    std::cout << "wrote " << render_out << "\n";
    return 0;
  }

  if (transfer_cmd->parsed()) {
    const RenderSetup body = load_render_setup(tr_body);
    const Checkpoint ext = load_checkpoint(tr_ext);
    const bool ext_residual = ext.meta.value("stage", 1) >= 2;
    std::filesystem::create_directories(tr_out);
    for (size_t f = 0; f < body.ckpt.frames.size(); ++f) {
      const FrameRender fr =
          render_with(body, body.ckpt.avatar, body.ckpt.frames[f], ext.avatar.field,
                      ext_residual ? &ext.avatar.residual_field : nullptr);
      char name[64];
      std::snprintf(name, sizeof(name), "/transfer_%04zu.png", f);
      write_png(tr_out + name, fr.rgb);
    }
    std::cout << "wrote " << body.ckpt.frames.size() << " frames to " << tr_out << "\n";
    return 0;
  }

  if (reshape_cmd->parsed()) {
    const RenderSetup rs = load_render_setup(rs_ckpt);
    nlohmann::json beta_json = nlohmann::json::parse(rs_beta, nullptr, false);
    if (beta_json.is_discarded()) beta_json = read_json_file(rs_beta);
    const auto v = beta_json.get<std::vector<double>>();
    if (static_cast<int>(v.size()) != rs.ckpt.model.shape_dim())
      throw std::invalid_argument("reshape: beta size mismatch");
    AvatarParams avatar = rs.ckpt.avatar;
    avatar.beta = Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size()));
    if (rs_frame >= static_cast<int>(rs.ckpt.frames.size()))
      throw std::invalid_argument("reshape: frame index out of range");
    const FrameRender fr =
        render_with(rs, avatar, rs.ckpt.frames[static_cast<size_t>(rs_frame)], avatar.field,
                    rs.residual_active ? &avatar.residual_field : nullptr);
    write_png(rs_out, fr.rgb);
    std::cout << "wrote " << rs_out << "\n";
    return 0;
  }

  if (grad_cmd->parsed()) {
    const Checkpoint ck = load_checkpoint(gc_ckpt);
    GradCheckOptions opts;
    opts.configurations = gc_samples;
    opts.tol = gc_tol;
    const auto reports = run_gradcheck(ck.model, &ck.avatar, opts);
    bool ok = true;
    for (const auto& r : reports) {
      if (r.checks == 0) continue;
      std::cout << (r.pass ? "  ok  " : " FAIL ") << r.objective << " / " << r.group
                << "  max_rel_err=" << r.max_rel_err << " (" << r.checks << " checks)\n";
      ok = ok && r.pass;
    }
    if (!ok) throw numerical_error("gradcheck failed");
    std::cout << "gradcheck passed\n";
    return 0;
  }

  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const numerical_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
