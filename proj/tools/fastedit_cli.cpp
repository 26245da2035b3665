// fastedit: build toy models, precompute covariance stores, solve edits,
// evaluate, and sweep dynamic multipliers from a JSON run configuration.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fastedit/eval.hpp"
#include "fastedit/exit_codes.hpp"
#include "fastedit/run_config.hpp"

namespace fs = std::filesystem;
using namespace fastedit;

namespace {

constexpr char kOutputDirEnv[] = "FASTEDIT_OUTPUT_DIR";

struct CommonOptions {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> model_seed;
  std::optional<std::uint64_t> stream_seed;
  std::optional<std::uint64_t> facts_seed;
  std::optional<std::uint64_t> batch_seed;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_path, "run configuration (JSON)")->required();
  cmd->add_option("-o,--out", o.out_dir, "output directory (overrides config and " + std::string(kOutputDirEnv) + ")");
  cmd->add_option("--model-seed", o.model_seed, "override model.seed");
  cmd->add_option("--stream-seed", o.stream_seed, "override stream.seed");
  cmd->add_option("--facts-seed", o.facts_seed, "override facts.seed");
  cmd->add_option("--batch-seed", o.batch_seed, "override edit.batch_seed");
}

struct Context {
  RunConfig config;
  fs::path out;
};

Context load_context(const CommonOptions& o) {
  Context ctx{load_run_config(o.config_path), {}};
  if (o.model_seed) ctx.config.model.seed = *o.model_seed;
  if (o.stream_seed) ctx.config.stream.seed = *o.stream_seed;
  if (o.facts_seed) ctx.config.facts.seed = *o.facts_seed;
  if (o.batch_seed) ctx.config.harness.batch_seed = *o.batch_seed;
  if (!o.out_dir.empty()) {
    ctx.out = o.out_dir;
  } else if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') {
    ctx.out = env;
  } else {
    ctx.out = ctx.config.output_dir;
  }
  std::error_code ec;
  fs::create_directories(ctx.out, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create output directory " + ctx.out.string() + ": " + ec.message());
  return ctx;
}

ToyModel model_for(const Context& ctx, const std::string& checkpoint) {
  if (!checkpoint.empty()) return load_model(checkpoint);
  return build_toy_model(ctx.config.model);
}

std::vector<FactRecord> read_facts(const std::string& path) {
  const auto bytes = io::read_file(path);
  return facts_from_json(std::string(bytes.begin(), bytes.end()));
}

nlohmann::json rank_json(const RankReport& r) {
  return {{"dim", r.dim},
          {"numeric_rank", r.numeric_rank},
          {"tolerance", r.tolerance},
          {"smallest_retained_singular_value", r.smallest_retained_singular_value},
          {"invertible", r.invertible}};
}

nlohmann::json solvability_json(const SolvabilityReport& r) {
  return {{"d_k", r.d_k},
          {"batch_size", r.batch_size},
          {"preserved_count", r.preserved_count},
          {"theoretical_minimum", r.theoretical_minimum},
          {"meets_minimum", r.meets_minimum},
          {"effective_rank", r.effective_rank},
          {"invertible", r.invertible}};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_build_model(const CommonOptions& o) {
  const Context ctx = load_context(o);
  const ToyModel model = build_toy_model(ctx.config.model);
  const fs::path path = ctx.out / "model.edkt";
  save_model(model, path);
  std::cout << "model=" << path.string() << "\nchecksum=" << model_checksum(model) << "\n";
  return kExitOk;
}

int cmd_facts(const CommonOptions& o, const std::string& checkpoint) {
  const Context ctx = load_context(o);
  const ToyModel model = model_for(ctx, checkpoint);
  const auto facts = generate_fact_suite(model, ctx.config.facts);
  const fs::path path = ctx.out / "facts.json";
  io::write_text_atomic(path, facts_to_json(facts));
  std::cout << "facts=" << path.string() << "\ncount=" << facts.size() << "\n";
  return kExitOk;
}

int cmd_precompute(const CommonOptions& o, const std::string& multiplier_text, const std::string& checkpoint) {
  const Context ctx = load_context(o);
  const auto t0 = std::chrono::steady_clock::now();
  const ToyModel model = model_for(ctx, checkpoint);
  const DynamicMultiplier m = DynamicMultiplier::parse(multiplier_text);
  const PrecomputeBudget budget = PrecomputeBudget::make(m, model.key_dim(), ctx.config.stream);
  const CovarianceStore store = harvest_keys(model, ctx.config.stream, ctx.config.layers, budget, ctx.config.workers);
  const fs::path path = ctx.out / ("store_dm" + m.to_string() + ".edkc");
  save_store(store, path);
  std::cout << "d_k=" << budget.d_k << "\n"
            << "d_m=" << m.to_string() << "\n"
            << "P'=" << budget.token_budget << "\n"
            << "stream_tokens=" << ctx.config.stream.total_tokens() << "\n"
            << "store=" << path.string() << "\n"
            << "elapsed_s=" << seconds_since(t0) << "\n";
  return kExitOk;
}

int cmd_edit(const CommonOptions& o, const std::string& store_path, const std::string& facts_path,
             const std::string& method_name, std::size_t batch, std::size_t offset, const std::string& targets_mode,
             const std::string& checkpoint) {
  const Context ctx = load_context(o);
  const ToyModel model = model_for(ctx, checkpoint);
  const CovarianceStore store = load_store(store_path);
  store.require_model(model);
  const auto all_facts = read_facts(facts_path);
  if (batch < 1 || offset + batch > all_facts.size()) {
    throw Error(ErrorKind::kCapacity, "edit: facts [" + std::to_string(offset) + ", " +
                                          std::to_string(offset + batch) + ") exceed the " +
                                          std::to_string(all_facts.size()) + " facts in " + facts_path);
  }
  const std::vector<FactRecord> facts(all_facts.begin() + static_cast<std::ptrdiff_t>(offset),
                                      all_facts.begin() + static_cast<std::ptrdiff_t>(offset + batch));
  const Method method = method_name.empty() ? ctx.config.methods.front() : parse_method(method_name);
  const HarnessConfig& hc = ctx.config.harness;

  std::vector<EditTarget> targets;
  if (targets_mode == "identity") {
    for (const auto& f : facts) {
      EditTarget t;
      t.key = extract_key(model, hc.edit_layer, f.prompt(), f.key_position());
      t.value = Vector::Zero(static_cast<Eigen::Index>(model.hidden_dim()));
      targets.push_back(std::move(t));
    }
  } else {
    targets = prepare_edit_targets(model, hc.edit_layer, facts, hc.value);
  }
  std::vector<std::size_t> idx(facts.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  EditRequest req = make_edit_request(facts, targets, idx);
  if (targets_mode == "identity") {
    // Constructed the way the solvers form W0 K; assigning into an existing
    // matrix takes a different Eigen kernel and can differ in the last bit.
    const Matrix predicted = model.down(hc.edit_layer) * req.keys;
    req.values = predicted;
  }
  const CovarianceAccumulator& cov = store.for_layer(hc.edit_layer);
  const SolverConfig sc = solver_config_for(method, cov, req, hc);

  EditSolution sol;
  try {
    sol = solve_edit(model.down(hc.edit_layer), cov, req, sc);
  } catch (const SolvabilityError& e) {
    std::cerr << nlohmann::json({{"error", e.what()}, {"solvability", solvability_json(e.report())}}).dump(1) << "\n";
    throw;
  }
  const ToyModel edited = apply_edit(model, hc.edit_layer, sol.delta);
  const fs::path ckpt = ctx.out / "edited.edkt";
  save_model(edited, ckpt);

  const Scores before = evaluate_facts(model, facts);
  const Scores after = evaluate_facts(edited, facts);
  const nlohmann::json diag = {
      {"method", std::string(to_string(method))},
      {"batch_size", facts.size()},
      {"fact_ids", req.fact_ids},
      {"edit_layer", hc.edit_layer},
      {"targets", targets_mode},
      {"lambda_used", sc.lambda},
      {"rho_used", sol.rho_used},
      {"memorization_residual", sol.memorization_residual},
      {"preservation_drift", sol.preservation_drift},
      {"delta_frobenius", sol.delta.norm()},
      {"rank_report", rank_json(sol.rank_report)},
      {"solvability", solvability_json(check_solvability(cov, req, sc.lambda, sc.rho, sc.rank_tolerance))},
      {"store_multiplier", store.multiplier.to_string()},
      {"model_checksum_before", model_checksum(model)},
      {"model_checksum_after", model_checksum(edited)},
      {"scores_before", {{"es", before.es}, {"ps", before.ps}, {"ns", before.ns}, {"s", before.s}}},
      {"scores_after", {{"es", after.es}, {"ps", after.ps}, {"ns", after.ns}, {"s", after.s}}},
  };
  const fs::path diag_path = ctx.out / "edit_diagnostics.json";
  io::write_text_atomic(diag_path, diag.dump(1) + "\n");
  std::cout << "checkpoint=" << ckpt.string() << "\n"
            << "diagnostics=" << diag_path.string() << "\n"
            << "checksum=" << model_checksum(edited) << "\n"
            << "es_after=" << after.es << "\n";
  return kExitOk;
}

int cmd_eval(const CommonOptions& o, const std::string& facts_path, const std::string& checkpoint) {
  const Context ctx = load_context(o);
  const ToyModel model = model_for(ctx, checkpoint);
  const Scores sc = evaluate_facts(model, read_facts(facts_path));
  const nlohmann::json j = {{"es", sc.es}, {"ps", sc.ps}, {"ns", sc.ns}, {"s", sc.s}};
  io::write_text_atomic(ctx.out / "eval.json", j.dump(1) + "\n");
  std::cout << "es=" << sc.es << "\nps=" << sc.ps << "\nns=" << sc.ns << "\ns=" << sc.s << "\n";
  return kExitOk;
}

int cmd_sweep(const CommonOptions& o) {
  const Context ctx = load_context(o);
  const RunConfig& c = ctx.config;
  const auto t0 = std::chrono::steady_clock::now();
  const ToyModel model = build_toy_model(c.model);
  const auto facts = generate_fact_suite(model, c.facts);
  const SweepResult res =
      sweep_multiplier(model, c.stream, c.layers, c.multipliers, c.schedule, c.methods, c.harness, facts, c.workers);
  io::write_text_atomic(ctx.out / "report.csv", report_to_csv(res.report));
  io::write_text_atomic(ctx.out / "report.json", report_to_json(res.report).dump(1) + "\n");
  const std::string summary = summary_text(res.report, c.methods);
  io::write_text_atomic(ctx.out / "summary.txt", summary);
  std::cout << summary << "cells=" << res.report.cells.size() << "\n"
            << "report=" << (ctx.out / "report.csv").string() << "\n";
  std::cerr << "elapsed_s=" << seconds_since(t0) << "\n";
  return kExitOk;
}

int cmd_inspect_store(const std::string& path) {
  const CovarianceStore s = load_store(path);
  std::cout << "format_version=" << s.format_version << "\n"
            << "d_k=" << s.d_k() << "\n"
            << "preserved_keys=" << s.sample_count() << "\n"
            << "d_m=" << s.multiplier.to_string() << "\n"
            << "token_budget=" << s.token_budget << "\n"
            << "model_checksum=" << s.model_checksum << "\n"
            << "stream_seed=" << s.stream_seed << "\n"
            << "sequence_length=" << s.sequence_length << "\n"
            << "layers=";
  for (std::size_t i = 0; i < s.layers.size(); ++i) std::cout << (i ? "," : "") << s.layers[i];
  std::cout << "\n";
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    const RankReport r = numeric_rank(s.accumulators[i].sum_outer());
    std::cout << "layer" << s.layers[i] << ".rank=" << r.numeric_rank << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fastedit: closed-form model editing with reduced covariance precomputation"};
  app.require_subcommand(1);

  CommonOptions build_opts, facts_opts, pre_opts, edit_opts, eval_opts, sweep_opts;
  std::string checkpoint, multiplier, store_path, facts_path, method, targets = "solve";
  std::size_t batch = 1, offset = 0;

  auto* build = app.add_subcommand("build-model", "write the configured toy model as a checkpoint");
  add_common(build, build_opts);

  auto* facts = app.add_subcommand("facts", "generate the synthetic fact suite");
  add_common(facts, facts_opts);
  facts->add_option("--model", checkpoint, "model checkpoint (default: build from config)");

  auto* pre = app.add_subcommand("precompute", "harvest keys and write a covariance store");
  add_common(pre, pre_opts);
  pre->add_option("-m,--multiplier", multiplier, "dynamic multiplier (positive integer or FULL)")->required();
  pre->add_option("--model", checkpoint, "model checkpoint (default: build from config)");

  auto* edit = app.add_subcommand("edit", "solve one batch edit and write the edited checkpoint");
  add_common(edit, edit_opts);
  edit->add_option("--store", store_path, "covariance store")->required();
  edit->add_option("--facts", facts_path, "facts file")->required();
  edit->add_option("--method", method, "MEMIT or EMMET (default: first configured method)");
  edit->add_option("--batch", batch, "number of facts to edit")->capture_default_str();
  edit->add_option("--offset", offset, "index of the first fact to edit")->capture_default_str();
  edit->add_option("--targets", targets, "solve: optimize values; identity: keep current outputs")
      ->check(CLI::IsMember({"solve", "identity"}))
      ->capture_default_str();
  edit->add_option("--model", checkpoint, "model checkpoint (default: build from config)");

  auto* ev = app.add_subcommand("eval", "score a model on a facts file");
  add_common(ev, eval_opts);
  ev->add_option("--facts", facts_path, "facts file")->required();
  ev->add_option("--model", checkpoint, "model checkpoint (default: build from config)");

  auto* sweep = app.add_subcommand("sweep", "run the multiplier sweep and write the report");
  add_common(sweep, sweep_opts);

  auto* inspect = app.add_subcommand("inspect-store", "print a covariance store's header and ranks");
  inspect->add_option("store", store_path, "covariance store")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*build) return cmd_build_model(build_opts);
    if (*facts) return cmd_facts(facts_opts, checkpoint);
    if (*pre) return cmd_precompute(pre_opts, multiplier, checkpoint);
    if (*edit) return cmd_edit(edit_opts, store_path, facts_path, method, batch, offset, targets, checkpoint);
    if (*ev) return cmd_eval(eval_opts, facts_path, checkpoint);
    if (*sweep) return cmd_sweep(sweep_opts);
    if (*inspect) return cmd_inspect_store(store_path);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitGeneric;
  }
  return kExitUsage;
}
