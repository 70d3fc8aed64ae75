// xco2ret: command-line front end over the C API.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "xco2/c_api.h"

using nlohmann::json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> workers;
  std::string out;
  std::vector<std::string> sets;
  bool quiet = false;
};

// "a.b.c=value": value is parsed as JSON when possible, else kept as a string.
void apply_set(json& overrides, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw CLI::ValidationError("--set", "expected key.path=value, got " + assignment);
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &overrides;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

int report(xco2_status st) {
  if (st != XCO2_OK) std::fprintf(stderr, "xco2ret: error: %s\n", xco2_last_error());
  return static_cast<int>(st);
}

void log_line(const char* msg, void*) { std::fprintf(stderr, "%s\n", msg); }

void print_result(char* result) {
  if (!result) return;
  std::printf("%s\n", json::parse(result).dump(2).c_str());
  xco2_string_free(result);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based XCO2 retrieval on synthetic soundings"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  json overrides = json::object();

  app.add_option("--config", g.config, "JSON experiment config (defaults when omitted)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--workers", g.workers, "worker threads for generation and retrieval")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory");
  app.add_option("--set", g.sets, "config override key.path=value (repeatable)");
  app.add_flag("--quiet,-q", g.quiet, "suppress progress messages");

  auto* gen = app.add_subcommand("gen-data", "simulate train/val/test/finetune datasets and EOF residual pairs");
  std::optional<std::size_t> n_train, n_val, n_test, n_finetune, n_eof, channels;
  gen->add_option("--n-train", n_train, "training records");
  gen->add_option("--n-val", n_val, "validation records");
  gen->add_option("--n-test", n_test, "test records");
  gen->add_option("--n-finetune", n_finetune, "finetune records");
  gen->add_option("--n-eof-pairs", n_eof, "simulated/observed pairs for EOF fitting");
  gen->add_option("--channels", channels, "channels per band");

  auto* eofs = app.add_subcommand("fit-eofs", "fit per-band residual EOFs and coefficient distributions");
  std::optional<std::size_t> eof_k;
  eofs->add_option("--k", eof_k, "EOFs kept per band");

  std::optional<std::string> eof_mode, prior_kind;
  std::optional<std::size_t> prior_epochs, diffusion_epochs;
  auto* tp = app.add_subcommand("train-prior", "pretrain the conditional-mean prior");
  tp->add_option("--prior-kind", prior_kind, "mlp, conv1d or external")->check(CLI::IsMember({"mlp", "conv1d", "external"}));
  tp->add_option("--eof-mode", eof_mode, "none, fixed or random")->check(CLI::IsMember({"none", "fixed", "random"}));
  tp->add_option("--epochs", prior_epochs, "training epochs");
  auto* td = app.add_subcommand("train-diffusion", "train the denoiser against the pretrained prior");
  td->add_option("--eof-mode", eof_mode, "none, fixed or random")->check(CLI::IsMember({"none", "fixed", "random"}));
  td->add_option("--epochs", diffusion_epochs, "training epochs");
  app.add_subcommand("finetune", "finetune prior and denoiser on observation-like data");

  auto* ret = app.add_subcommand("retrieve", "draw posterior samples per sounding");
  json ret_opts = json::object();
  std::string stage = "pre", split = "test", dataset, output;
  std::optional<std::size_t> n_samples;
  ret->add_option("--stage", stage, "pre or post (finetuned)")->check(CLI::IsMember({"pre", "post"}));
  ret->add_option("--split", split, "dataset split under <out>/data");
  ret->add_option("--dataset", dataset, "explicit dataset file")->check(CLI::ExistingFile);
  ret->add_option("--n-samples", n_samples, "samples per sounding")->check(CLI::PositiveNumber);
  ret->add_option("--output", output, "output JSON-lines file");

  auto* roe = app.add_subcommand("retrieve-oe", "optimal-estimation baseline per sounding");
  roe->add_option("--split", split, "dataset split under <out>/data");
  roe->add_option("--dataset", dataset, "explicit dataset file")->check(CLI::ExistingFile);
  roe->add_option("--output", output, "output JSON-lines file");

  auto* ev = app.add_subcommand("evaluate", "score retrievals against a truth dataset");
  std::vector<std::string> retrievals;
  std::string truth, report_dir;
  ev->add_option("retrievals", retrievals, "retrieval JSON-lines files")->required()->check(CLI::ExistingFile);
  ev->add_option("--truth", truth, "truth dataset (default <out>/data/test.xcd)")->check(CLI::ExistingFile);
  ev->add_option("--report-dir", report_dir, "report directory (default <out>/reports)");

  app.add_subcommand("show-config", "print the effective configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(XCO2_ERR_USAGE);
  }

  try {
    for (const auto& s : g.sets) apply_set(overrides, s);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "xco2ret: %s\n", e.what());
    return static_cast<int>(XCO2_ERR_USAGE);
  }
  if (g.seed) overrides["seed"] = *g.seed;
  if (g.workers) overrides["workers"] = *g.workers;
  if (!g.out.empty()) overrides["output_dir"] = g.out;
  if (n_train) overrides["data"]["n_train"] = *n_train;
  if (n_val) overrides["data"]["n_val"] = *n_val;
  if (n_test) overrides["data"]["n_test"] = *n_test;
  if (n_finetune) overrides["data"]["n_finetune"] = *n_finetune;
  if (n_eof) overrides["data"]["n_eof_pairs"] = *n_eof;
  if (channels) overrides["data"]["channels_per_band"] = *channels;
  if (eof_k) overrides["eof"]["k"] = *eof_k;
  if (eof_mode) overrides["eof"]["mode"] = *eof_mode;
  if (prior_kind) overrides["prior"]["kind"] = *prior_kind;
  if (prior_epochs) overrides["prior"]["epochs"] = *prior_epochs;
  if (diffusion_epochs) overrides["diffusion"]["epochs"] = *diffusion_epochs;

  xco2_experiment* exp = nullptr;
  const std::string ov = overrides.dump();
  if (const auto st = xco2_experiment_open(g.config.empty() ? nullptr : g.config.c_str(), ov.c_str(), &exp); st != XCO2_OK)
    return report(st);
  if (!g.quiet) xco2_experiment_set_logger(exp, log_line, nullptr);

  xco2_status st = XCO2_OK;
  char* result = nullptr;
  const std::string cmd = app.get_subcommands().front()->get_name();
  if (cmd == "gen-data") {
    st = xco2_gen_data(exp);
  } else if (cmd == "fit-eofs") {
    st = xco2_fit_eofs(exp);
  } else if (cmd == "train-prior") {
    st = xco2_train_prior(exp);
  } else if (cmd == "train-diffusion") {
    st = xco2_train_diffusion(exp);
  } else if (cmd == "finetune") {
    st = xco2_finetune(exp);
  } else if (cmd == "retrieve") {
    json o{{"stage", stage}, {"split", split}};
    if (!dataset.empty()) o["dataset"] = dataset;
    if (!output.empty()) o["output"] = output;
    if (n_samples) o["n_samples"] = *n_samples;
    st = xco2_retrieve(exp, o.dump().c_str(), &result);
  } else if (cmd == "retrieve-oe") {
    json o{{"split", split}};
    if (!dataset.empty()) o["dataset"] = dataset;
    if (!output.empty()) o["output"] = output;
    st = xco2_retrieve_oe(exp, o.dump().c_str(), &result);
  } else if (cmd == "evaluate") {
    json o{{"retrievals", retrievals}};
    if (!truth.empty()) o["truth"] = truth;
    if (!report_dir.empty()) o["output_dir"] = report_dir;
    st = xco2_evaluate(exp, o.dump().c_str(), &result);
  } else if (cmd == "show-config") {
    st = xco2_experiment_config(exp, &result);
    if (st == XCO2_OK) {
      std::printf("%s\n", result);
      xco2_string_free(result);
      result = nullptr;
    }
  }
  if (st == XCO2_OK && !g.quiet) print_result(result);
  else if (result) xco2_string_free(result);
  xco2_experiment_free(exp);
  return report(st);
}
