#include "xco2/c_api.h"

#include <cstring>
#include <new>
#include <string>

#include "xco2/pipeline.hpp"

using nlohmann::json;
using namespace xco2;

struct xco2_experiment {
  pipeline::Experiment exp;
  xco2_log_fn log_fn = nullptr;
  void* log_user = nullptr;
};

struct xco2_sampler {
  diffusion::DenoiserNet net;
  priors::PriorModel prior;
  diffusion::DiffusionSchedule schedule;
};

namespace {

thread_local std::string g_last_error;

xco2_status status_of(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage:
      return XCO2_ERR_USAGE;
    case ErrorKind::validation:
      return XCO2_ERR_VALIDATION;
    case ErrorKind::runtime:
      break;
  }
  return XCO2_ERR_RUNTIME;
}

template <typename F>
xco2_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return XCO2_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const json::exception& e) {
    g_last_error = std::string("invalid JSON: ") + e.what();
    return XCO2_ERR_VALIDATION;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return XCO2_ERR_RUNTIME;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return XCO2_ERR_RUNTIME;
  } catch (...) {
    g_last_error = "unknown error";
    return XCO2_ERR_RUNTIME;
  }
}

char* dup_string(const std::string& s) {
  auto* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

json parse_options(const char* text) {
  if (!text || !*text) return json::object();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::usage, std::string("options are not valid JSON: ") + e.what());
  }
  require(j.is_object(), ErrorKind::usage, "options must be a JSON object");
  return j;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    require(ok, ErrorKind::usage, std::string(what) + ": unknown option \"" + it.key() + "\"");
  }
}

void require_handle(const void* p, const char* what) {
  require(p != nullptr, ErrorKind::usage, std::string(what) + " is NULL");
}

json result_json(const pipeline::RetrievalResult& r) {
  return {{"path", r.path},
          {"records", r.records},
          {"converged", r.converged},
          {"median_ms", r.timing.median_ms},
          {"p95_ms", r.timing.p95_ms}};
}

void emit(char** out, const json& j) {
  if (out) *out = dup_string(j.dump());
}

}  // namespace

extern "C" {

const char* xco2_version(void) { return "0.1.0"; }

const char* xco2_last_error(void) { return g_last_error.c_str(); }

void xco2_string_free(char* s) { std::free(s); }

xco2_status xco2_default_config(char** json_out) {
  return guarded([&] {
    require_handle(json_out, "json_out");
    *json_out = dup_string(pipeline::default_config().dump(2));
  });
}

xco2_status xco2_experiment_open(const char* config_path, const char* overrides_json, xco2_experiment** out) {
  return guarded([&] {
    require_handle(out, "out");
    *out = nullptr;
    json overrides;
    if (overrides_json && *overrides_json) {
      try {
        overrides = json::parse(overrides_json);
      } catch (const json::exception& e) {
        fail(ErrorKind::usage, std::string("overrides are not valid JSON: ") + e.what());
      }
    }
    auto cfg = pipeline::ExperimentConfig::load(config_path ? config_path : "", overrides);
    auto* h = new xco2_experiment{pipeline::Experiment(std::move(cfg))};
    *out = h;
  });
}

void xco2_experiment_free(xco2_experiment* exp) { delete exp; }

xco2_status xco2_experiment_set_logger(xco2_experiment* exp, xco2_log_fn fn, void* user) {
  return guarded([&] {
    require_handle(exp, "experiment");
    exp->log_fn = fn;
    exp->log_user = user;
    auto cfg = exp->exp.config();
    if (fn)
      exp->exp = pipeline::Experiment(std::move(cfg), [fn, user](const std::string& m) { fn(m.c_str(), user); });
    else
      exp->exp = pipeline::Experiment(std::move(cfg));
  });
}

xco2_status xco2_experiment_config(const xco2_experiment* exp, char** json_out) {
  return guarded([&] {
    require_handle(exp, "experiment");
    require_handle(json_out, "json_out");
    *json_out = dup_string(exp->exp.config().raw.dump(2));
  });
}

xco2_status xco2_experiment_config_hash(const xco2_experiment* exp, char** hash_out) {
  return guarded([&] {
    require_handle(exp, "experiment");
    require_handle(hash_out, "hash_out");
    *hash_out = dup_string(exp->exp.config().hash());
  });
}

#define XCO2_COMMAND(name, method)             \
  xco2_status name(xco2_experiment* exp) {     \
    return guarded([&] {                       \
      require_handle(exp, "experiment");       \
      exp->exp.method();                       \
    });                                        \
  }

XCO2_COMMAND(xco2_gen_data, gen_data)
XCO2_COMMAND(xco2_fit_eofs, fit_eofs)
XCO2_COMMAND(xco2_train_prior, train_prior)
XCO2_COMMAND(xco2_train_diffusion, train_diffusion)
XCO2_COMMAND(xco2_finetune, finetune)

#undef XCO2_COMMAND

xco2_status xco2_retrieve(xco2_experiment* exp, const char* options_json, char** out) {
  return guarded([&] {
    require_handle(exp, "experiment");
    const auto j = parse_options(options_json);
    check_keys(j, {"stage", "split", "dataset", "n_samples", "output"}, "retrieve");
    pipeline::RetrieveOptions o;
    o.stage = j.value("stage", o.stage);
    o.split = j.value("split", o.split);
    o.dataset = j.value("dataset", o.dataset);
    o.output = j.value("output", o.output);
    if (j.contains("n_samples")) o.n_samples = j.at("n_samples").get<std::size_t>();
    emit(out, result_json(exp->exp.retrieve(o)));
  });
}

xco2_status xco2_retrieve_oe(xco2_experiment* exp, const char* options_json, char** out) {
  return guarded([&] {
    require_handle(exp, "experiment");
    const auto j = parse_options(options_json);
    check_keys(j, {"split", "dataset", "output"}, "retrieve-oe");
    pipeline::RetrieveOEOptions o;
    o.split = j.value("split", o.split);
    o.dataset = j.value("dataset", o.dataset);
    o.output = j.value("output", o.output);
    emit(out, result_json(exp->exp.retrieve_oe(o)));
  });
}

xco2_status xco2_evaluate(xco2_experiment* exp, const char* options_json, char** out) {
  return guarded([&] {
    require_handle(exp, "experiment");
    const auto j = parse_options(options_json);
    check_keys(j, {"retrievals", "truth", "output_dir"}, "evaluate");
    pipeline::EvaluateOptions o;
    o.retrievals = j.value("retrievals", std::vector<std::string>{});
    o.truth = j.value("truth", std::string());
    o.output_dir = j.value("output_dir", std::string());
    const auto r = exp->exp.evaluate(o);
    json reports = json::array();
    for (const auto& rep : r.reports) reports.push_back(rep.to_json());
    emit(out, json{{"reports", reports}, {"files", r.files}});
  });
}

xco2_status xco2_sampler_open(const xco2_experiment* exp, const char* stage, xco2_sampler** out) {
  return guarded([&] {
    require_handle(exp, "experiment");
    require_handle(out, "out");
    *out = nullptr;
    const std::string st = stage ? stage : "pre";
    require(st == "pre" || st == "post", ErrorKind::usage, "stage must be pre or post");
    const auto& e = exp->exp;
    const auto den = e.path(st == "post" ? pipeline::kDenoiserFinetunedFile : pipeline::kDenoiserFile);
    const auto pri = e.path(st == "post" ? pipeline::kPriorFinetunedFile : pipeline::kPriorFile);
    auto s = std::make_unique<xco2_sampler>();
    s->net = diffusion::load_denoiser(den);
    s->prior = priors::load_prior(pri);
    s->schedule = diffusion::build_cosine_schedule(s->net.schedule_T, s->net.schedule_s);
    *out = s.release();
  });
}

void xco2_sampler_free(xco2_sampler* sampler) { delete sampler; }

size_t xco2_sampler_covariate_count(const xco2_sampler* sampler) {
  return sampler ? sampler->net.covariate_count : 0;
}

xco2_status xco2_sampler_draw(const xco2_sampler* s, const double* covariates, size_t n_covariates,
                              double external_prior, size_t n_samples, uint64_t seed, uint64_t sounding_id,
                              double* out, double* prior_out) {
  return guarded([&] {
    require_handle(s, "sampler");
    require_handle(covariates, "covariates");
    require_handle(out, "out");
    require(n_covariates == s->net.covariate_count, ErrorKind::validation,
            "sampler expects " + std::to_string(s->net.covariate_count) + " covariates, got " +
                std::to_string(n_covariates));
    const std::span<const double> cov(covariates, n_covariates);
    const double xp = priors::predict_prior(
        s->prior, cov, s->prior.trained() ? std::nullopt : std::optional<double>(external_prior));
    const auto x = diffusion::sample_with_prior(s->net, cov, xp, n_samples, s->schedule, seed, sounding_id);
    std::copy(x.begin(), x.end(), out);
    if (prior_out) *prior_out = xp;
  });
}

}  // extern "C"
