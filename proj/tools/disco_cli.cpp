// Command-line surface for the scene-graph-to-image pipeline: dataset
// generation, training, sampling (plain or layered), consistency-preserving
// edits, oracle evaluation, and the verification suites.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "disco/disco.hpp"

namespace fs = std::filesystem;
using namespace disco;

namespace {

constexpr int kExitInternal = 1;
constexpr int kExitMissing = 2;
constexpr int kExitValidation = 3;

int exit_code_for(const error& e) {
  switch (e.kind()) {
    case errc::io:
      return kExitMissing;
    case errc::internal:
      return kExitInternal;
    default:
      return kExitValidation;
  }
}

SamplerRule parse_rule(const std::string& s) {
  if (s == "ddim" || s == "deterministic") return SamplerRule::deterministic;
  if (s == "ancestral") return SamplerRule::ancestral;
  fail(errc::parse, "unknown sampler rule \"" + s + "\" (want ddim|ancestral)");
}

Edit parse_edit(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> tok;
  std::string t;
  while (in >> t) tok.push_back(t);
  if (tok.size() >= 3 && tok[0] == "set-attr") {
    if (tok.size() != 3) fail(errc::parse, "edit: want \"set-attr ID ATTR\"");
    return SetAttribute{tok[1], tok[2]};
  }
  if (tok.size() >= 4 && tok[0] == "add-node") {
    // predicates may contain spaces: add-node CAT REL... ID
    std::string rel = tok[2];
    for (std::size_t i = 3; i + 1 < tok.size(); ++i) rel += " " + tok[i];
    return AddNode{tok[1], {{rel, tok.back()}}};
  }
  fail(errc::parse, "edit: want \"set-attr ID ATTR\" or \"add-node CAT REL ID\", got \"" + text + "\"");
}

SceneGraph load_graph(const fs::path& path, const Vocabulary& vocab) {
  return parse_scene_graph(read_file(path), vocab);
}

struct SampleArgs {
  std::string ckpt, graph, out;
  std::uint64_t seed = 0;
  int steps = 50;
  double cfg = 7.5;
  int nl = 5;
  bool mls = false;
  std::string rule = "ddim";
};

void add_sample_flags(CLI::App* cmd, SampleArgs& a) {
  cmd->add_option("--ckpt", a.ckpt, "checkpoint file")->required();
  cmd->add_option("--graph", a.graph, "scene graph JSON")->required();
  cmd->add_option("--seed", a.seed, "sampling seed");
  cmd->add_option("--steps", a.steps, "reverse steps");
  cmd->add_option("--cfg", a.cfg, "guidance scale");
  cmd->add_option("--out", a.out, "output image (PPM)")->required();
  cmd->add_option("--sampler", a.rule, "ddim|ancestral");
}

int run(int argc, char** argv) {
  CLI::App app{"scene-graph-to-image toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
  std::string gen_out;
  int gen_num = 512;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--num", gen_num, "number of scenes");
  gen->add_option("--seed", gen_seed, "generator seed");

  // train
  auto* tr = app.add_subcommand("train", "train the full pipeline");
  std::string tr_config, tr_data, tr_out;
  int tr_threads = -1;
  tr->add_option("--config", tr_config, "training config JSON");
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output checkpoint")->required();
  tr->add_option("--threads", tr_threads, "worker threads (overrides config)");

  // sample
  auto* sm = app.add_subcommand("sample", "generate an image from a scene graph");
  SampleArgs sa;
  add_sample_flags(sm, sa);
  sm->add_option("--nl", sa.nl, "layered-sampler view count");
  sm->add_flag("--mls,!--no-mls", sa.mls, "use the multi-layered sampler");

  // edit
  auto* ed = app.add_subcommand("edit", "re-sample a scene after a graph edit");
  SampleArgs ea;
  std::string ed_state, ed_edit;
  add_sample_flags(ed, ea);
  ed->add_option("--state", ed_state, "seed sidecar from a previous --mls sample")->required();
  ed->add_option("--edit", ed_edit, "\"set-attr ID ATTR\" or \"add-node CAT REL ID\"")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "oracle metrics over a dataset");
  std::string ev_ckpt, ev_data, ev_report;
  int ev_num = 64, ev_steps = 50;
  double ev_cfg = 7.5;
  std::uint64_t ev_seed = 1234;
  int ev_threads = 0;
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--report", ev_report, "output report JSON")->required();
  ev->add_option("--num", ev_num, "scenes to evaluate");
  ev->add_option("--seed", ev_seed);
  ev->add_option("--steps", ev_steps);
  ev->add_option("--cfg", ev_cfg);
  ev->add_option("--threads", ev_threads);

  // check-grad / eval-masks
  auto* cg = app.add_subcommand("check-grad", "finite-difference audit of every op and a denoiser block");
  std::uint64_t cg_seed = 2026;
  cg->add_option("--seed", cg_seed);
  auto* em = app.add_subcommand("eval-masks", "brute-force check of the attention mask rule");
  std::uint64_t em_seed = 99;
  int em_num = 1000;
  em->add_option("--seed", em_seed);
  em->add_option("--num", em_num, "random instances");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    write_dataset(gen_out, gen_num, gen_seed);
    std::cout << "wrote " << gen_num << " scenes to " << gen_out << "\n";
    return 0;
  }

  if (tr->parsed()) {
    TrainConfig config;
    if (!tr_config.empty()) config = train_config_from_json(nlohmann::json::parse(read_file(tr_config)));
    if (tr_threads >= 0) config.threads = tr_threads;
    Dataset data = load_dataset(tr_data);
    TrainState ts;
    ts.config = config;
    ts.model = DiscoModel(data.vocab, config.seed, config.t_steps);
    ts.rng = Rng(config.seed);
    train(ts, data, &std::cerr);
    save_checkpoint(ts, tr_out);
    std::cout << "checkpoint written to " << tr_out << "\n";
    return 0;
  }

  if (sm->parsed()) {
    TrainState ts = load_checkpoint(sa.ckpt);
    SceneGraph g = load_graph(sa.graph, ts.model.embedder.vocab);
    SampleOpts opts;
    opts.steps = sa.steps;
    opts.cfg_scale = sa.cfg;
    opts.rule = parse_rule(sa.rule);
    Tensor image;
    if (sa.mls) {
      MlsState state = make_mls_state(g, sa.nl, sa.seed);
      image = mls_sample(ts.model, g, state, opts);
      write_file_atomic(sa.out + ".state.json", mls_state_to_json(state).dump(2) + "\n");
    } else {
      Rng rng = Rng(sa.seed).split("prior");
      PreparedCond prep = prepare_cond(ts.model, g, rng);
      image = sample_image(ts.model, prep.cond, sa.seed, opts);
    }
    save_ppm(image, sa.out);
    std::cout << "image written to " << sa.out << "\n";
    return 0;
  }

  if (ed->parsed()) {
    TrainState ts = load_checkpoint(ea.ckpt);
    SceneGraph g = load_graph(ea.graph, ts.model.embedder.vocab);
    MlsState state = mls_state_from_json(nlohmann::json::parse(read_file(ed_state)));
    SampleOpts opts;
    opts.steps = ea.steps;
    opts.cfg_scale = ea.cfg;
    opts.rule = parse_rule(ea.rule);
    EditResult result = edit_and_resample(ts.model, g, parse_edit(ed_edit), state, opts);
    save_ppm(result.after, ea.out);
    write_file_atomic(ea.out + ".state.json", mls_state_to_json(result.state_after).dump(2) + "\n");
    write_file_atomic(ea.out + ".graph.json", serialize_scene_graph(result.edited));
    std::cout << "image written to " << ea.out << "\n";
    return 0;
  }

  if (ev->parsed()) {
    TrainState ts = load_checkpoint(ev_ckpt);
    Dataset data = load_dataset(ev_data);
    EvalOpts opts;
    opts.num = ev_num;
    opts.seed = ev_seed;
    opts.sample.steps = ev_steps;
    opts.sample.cfg_scale = ev_cfg;
    opts.threads = ev_threads;
    EvalReport rep = evaluate_model(ts.model, data, opts);
    nlohmann::ordered_json j;
    j["layout_iou"] = rep.metrics.layout_iou;
    j["attr_acc"] = rep.metrics.attr_acc;
    j["count_acc"] = rep.metrics.count_acc;
    j["num_scenes"] = rep.num;
    nlohmann::ordered_json curve = nlohmann::ordered_json::array();
    for (const auto& row : ts.loss_curve) curve.push_back({row.step, row.total, row.ldm, row.kl, row.layout});
    j["loss_curve"] = curve;
    write_file_atomic(ev_report, j.dump(2) + "\n");
    std::cout << "layout_iou " << rep.metrics.layout_iou << " attr_acc " << rep.metrics.attr_acc
              << " count_acc " << rep.metrics.count_acc << "\n";
    return 0;
  }

  if (cg->parsed()) {
    auto rows = gradient_audit(cg_seed);
    bool all = true;
    for (const auto& row : rows) {
      std::printf("%-16s max_rel_err %.3e %s\n", row.name.c_str(), row.max_rel_err,
                  row.passed ? "ok" : "FAIL");
      all &= row.passed;
    }
    if (!all) {
      std::cerr << "gradient audit failed\n";
      return kExitValidation;
    }
    return 0;
  }

  if (em->parsed()) {
    MaskAuditResult res = mask_audit(em_seed, em_num);
    std::printf("instances %d mismatches %d fixture %s\n", res.instances, res.mismatches,
                res.fixture_passed ? "ok" : "FAIL");
    if (!res.passed()) {
      std::cerr << "mask audit failed\n";
      return kExitValidation;
    }
    return 0;
  }

  return kExitInternal;
}

} // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}
