#include "satm/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "satm/data.hpp"
#include "satm/errors.hpp"
#include "satm/evalharness.hpp"
#include "satm/hypergrad.hpp"
#include "satm/io.hpp"
#include "satm/satm.hpp"
#include "satm/trajectory.hpp"

namespace satm {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

std::string default_out() {
  if (const char* env = std::getenv("SATM_OUTPUT_DIR")) return env;
  return "satm_out";
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = s.find(',', pos);
    if (comma == std::string::npos) {
      if (pos < s.size()) out.push_back(s.substr(pos));
      break;
    }
    if (comma > pos) out.push_back(s.substr(pos, comma - pos));
    pos = comma + 1;
  }
  return out;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& tok : split_list(s)) out.push_back(std::stod(tok));
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& tok : split_list(s)) out.push_back(std::stoul(tok));
  return out;
}

ModelSpec parse_arch(const std::string& arch, std::size_t hidden, std::size_t d, std::size_t C) {
  if (arch == "softmax" || arch == "softmax_regression") return ModelSpec::softmax(d, C);
  if (arch == "mlp1") return ModelSpec::mlp(d, hidden, C);
  if (arch.rfind("mlp1:", 0) == 0) return ModelSpec::mlp(d, std::stoul(arch.substr(5)), C);
  throw ContractViolation("unknown architecture '" + arch + "' (want softmax | mlp1 | mlp1:H)");
}

/// Prepends tokens derived from a --config JSON file (if present in args), so
/// explicit flags override config values via the take-last policy. A manifest
/// file is accepted too (its "parameters" object is used), and keys the
/// command does not define are skipped, so one config file can drive a whole
/// pipeline.
std::vector<std::string> expand_config(const std::vector<std::string>& args, const CLI::App& app) {
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  std::vector<std::string> tokens;
  if (!config_path.empty()) {
    json cfg = json::parse(io::read_file(config_path), nullptr, false);
    if (cfg.is_discarded()) throw FormatError("config: malformed JSON in " + config_path);
    if (cfg.contains("parameters") && cfg["parameters"].is_object()) cfg = cfg["parameters"];
    for (const auto& [key, value] : cfg.items()) {
      if (key == "config" || key == "out") continue;
      if (!app.get_option_no_throw("--" + key)) continue;
      if (value.is_boolean()) {
        if (value.get<bool>()) tokens.push_back("--" + key);
      } else if (value.is_string()) {
        tokens.push_back("--" + key);
        tokens.push_back(value.get<std::string>());
      } else if (value.is_number() || value.is_number_integer()) {
        tokens.push_back("--" + key);
        tokens.push_back(value.dump());
      }
    }
  }
  tokens.insert(tokens.end(), args.begin(), args.end());
  return tokens;
}

int run_guarded(const std::function<void()>& body) {
  try {
    body();
    return kExitOk;
  } catch (const ContractViolation& e) {
    std::cerr << "error (configuration): " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "error (format): " << e.what() << "\n";
    return kExitIo;
  } catch (const IoError& e) {
    std::cerr << "error (io): " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "error (numeric): " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

/// Parse + dispatch boilerplate shared by the subcommands.
int run_command(const std::string& name, const std::vector<std::string>& args,
                CLI::App& app, const std::function<void()>& body) {
  std::vector<std::string> tokens;
  try {
    tokens = expand_config(args, app);
  } catch (const IoError& e) {
    std::cerr << "error (io): " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << "error (format): " << e.what() << "\n";
    return kExitIo;
  }
  std::vector<const char*> argv;
  const std::string prog = "satm " + name;
  argv.push_back(prog.c_str());
  for (const auto& t : tokens) argv.push_back(t.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  return run_guarded(body);
}

void write_manifest(const fs::path& out_dir, const std::string& command, json parameters,
                    const std::vector<std::string>& output_files, json extra = json::object()) {
  json outputs = json::object();
  for (const auto& f : output_files) outputs[f] = io::hex64(io::hash_file(out_dir / f));
  json manifest{{"command", command}, {"parameters", std::move(parameters)}, {"outputs", outputs}};
  for (auto& [k, v] : extra.items()) manifest[k] = v;
  io::write_file(out_dir / ("manifest-" + command + ".json"), manifest.dump(2) + "\n");
}

CLI::App* make_app(const std::string& desc) {
  auto* app = new CLI::App(desc);
  app->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  return app;
}

struct CommonFlags {
  std::string config;
  std::string out = default_out();
  uint64_t seed = 0;

  void add_to(CLI::App& app) {
    app.add_option("--config", config, "JSON config (or manifest) with parameter defaults");
    app.add_option("--out", out, "output directory (default $SATM_OUTPUT_DIR or ./satm_out)");
    app.add_option("--seed", seed, "root seed; all randomness derives from it");
  }
};

// ---- gen-data ----

int cmd_gen_data(const std::vector<std::string>& args) {
  auto app = std::unique_ptr<CLI::App>(make_app("generate or ingest desk-scale datasets"));
  CommonFlags common;
  common.add_to(*app);
  std::string kind = "mixture";
  std::size_t classes = 4, dim = 10, n_train = 200, n_test = 200;
  double separation = 4.0;
  std::string images, labels, test_images, test_labels;
  std::size_t limit_per_class = 0, test_limit_per_class = 0, downscale = 0;
  bool zca = false;
  double zca_eps = 1e-6;
  app->add_option("--kind", kind, "mixture | idx")->check(CLI::IsMember({"mixture", "idx"}));
  app->add_option("--classes", classes);
  app->add_option("--dim", dim);
  app->add_option("--separation", separation, "pairwise distance between class means");
  app->add_option("--n-train", n_train, "train samples per class");
  app->add_option("--n-test", n_test, "test samples per class");
  app->add_option("--images", images, "IDX image file (kind=idx)");
  app->add_option("--labels", labels, "IDX label file (kind=idx)");
  app->add_option("--test-images", test_images);
  app->add_option("--test-labels", test_labels);
  app->add_option("--limit-per-class", limit_per_class, "0 = keep all");
  app->add_option("--test-limit-per-class", test_limit_per_class);
  app->add_option("--downscale", downscale, "block-mean downscale to this side length (0 = off)");
  app->add_flag("--zca", zca, "fit ZCA whitening on train and apply to both splits");
  app->add_option("--zca-eps", zca_eps);

  return run_command("gen-data", args, *app, [&] {
    RealDataset train, test;
    if (kind == "mixture") {
      train = make_gaussian_mixture(classes, dim, separation, n_train, common.seed, "train");
      test = make_gaussian_mixture(classes, dim, separation, n_test, common.seed, "test");
    } else {
      if (images.empty() || labels.empty())
        throw ContractViolation("gen-data --kind idx requires --images and --labels");
      auto lim = limit_per_class ? std::optional<std::size_t>(limit_per_class) : std::nullopt;
      auto down = downscale ? std::optional<std::size_t>(downscale) : std::nullopt;
      train = load_idx(images, labels, lim, down);
      train.split = "train";
      if (test_images.empty() || test_labels.empty())
        throw ContractViolation("gen-data --kind idx requires --test-images and --test-labels");
      auto tlim = test_limit_per_class ? std::optional<std::size_t>(test_limit_per_class) : std::nullopt;
      test = load_idx(test_images, test_labels, tlim, down);
      test.split = "test";
      test.id += "-test";
    }
    if (zca) {
      const ZcaTransform t = fit_zca(train, zca_eps);
      if (t.underdetermined)
        std::cerr << "warning: ZCA fit with n <= d; whitening may be ill-conditioned\n";
      train.features = apply_zca(t, train.features);
      test.features = apply_zca(t, test.features);
      train.id += "-zca";
      test.id += "-zca";
    }
    const fs::path out(common.out);
    save_real(train, out / "train.satmrd");
    save_real(test, out / "test.satmrd");
    json params{{"kind", kind},         {"classes", classes},
                {"dim", dim},           {"separation", separation},
                {"n-train", n_train},   {"n-test", n_test},
                {"seed", common.seed},  {"zca", zca},
                {"zca-eps", zca_eps}};
    if (kind == "idx") {
      params["images"] = images;
      params["labels"] = labels;
      params["test-images"] = test_images;
      params["test-labels"] = test_labels;
      params["limit-per-class"] = limit_per_class;
      params["test-limit-per-class"] = test_limit_per_class;
      params["downscale"] = downscale;
    }
    write_manifest(out, "gen-data", params, {"train.satmrd", "test.satmrd"},
                   {{"dataset_ids", {train.id, test.id}}});
    std::cout << "wrote " << (out / "train.satmrd").string() << " (" << train.size() << " rows), "
              << (out / "test.satmrd").string() << " (" << test.size() << " rows)\n";
  });
}

// ---- train-experts ----

int cmd_train_experts(const std::vector<std::string>& args) {
  auto app = std::unique_ptr<CLI::App>(make_app("train expert trajectories on real data"));
  CommonFlags common;
  common.add_to(*app);
  std::string data_path, arch = "softmax";
  std::size_t hidden = 32, epochs = 8, batch_size = 32, count = 5, jobs = 1;
  double step_size = 0.1;
  app->add_option("--data", data_path, "training dataset (SATMRD01)")->required();
  app->add_option("--arch", arch, "softmax | mlp1 | mlp1:H");
  app->add_option("--hidden", hidden);
  app->add_option("--epochs", epochs);
  app->add_option("--step-size", step_size);
  app->add_option("--batch-size", batch_size);
  app->add_option("--count", count, "number of trajectories (seeds seed..seed+count-1)");
  app->add_option("--jobs", jobs, "parallel training jobs");

  return run_command("train-experts", args, *app, [&] {
    if (epochs < 1) throw ContractViolation("train-experts: --epochs must be >= 1");
    const RealDataset data = load_real(data_path);
    const ModelSpec spec = parse_arch(arch, hidden, data.dim(), data.class_count);
    const fs::path out(common.out);

    std::vector<ExpertTrajectory> trajs(count);
    std::exception_ptr failure;
    std::mutex mu;
    const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, count));
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < count; i += workers) {
          try {
            trajs[i] = train_expert(spec, data, epochs, step_size, batch_size, common.seed + i);
          } catch (...) {
            std::lock_guard<std::mutex> lk(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    std::vector<std::string> files;
    for (std::size_t i = 0; i < count; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "expert_%03zu.satmtrj", i);
      save_trajectory(trajs[i], out / name);
      files.emplace_back(name);
    }
    json params{{"data", data_path},   {"arch", arch},       {"hidden", hidden},
                {"epochs", epochs},    {"step-size", step_size}, {"batch-size", batch_size},
                {"count", count},      {"seed", common.seed}};
    write_manifest(out, "train-experts", params, files);
    std::cout << "trained " << count << " x " << spec.describe() << " (" << epochs
              << " epochs each) into " << out.string() << "\n";
  });
}

// ---- condense ----

struct CondenseFlags {
  std::size_t ipc = 1, inner_steps = 20, expert_span = 2, max_start = 2, iota = 0;
  int64_t tau = -1;  // -1: default to iota
  double rho = 0.05, gamma = 0.01, outer_lr = 10.0, lr_lr = 1e-5;
  std::size_t iterations = 500, synthetic_batch = 0, eval_cadence = 0;
  std::string init_mode = "real";
  double alpha0 = 0.02;

  void add_to(CLI::App& app) {
    app.add_option("--ipc", ipc, "images per class");
    app.add_option("--inner-steps", inner_steps, "N");
    app.add_option("--expert-span", expert_span, "M");
    app.add_option("--max-start", max_start, "max segment start epoch");
    app.add_option("--iota", iota, "truncation index (differentiate steps iota+1..N)");
    app.add_option("--tau", tau, "reuse index; -1 defaults to iota");
    app.add_option("--rho", rho, "perturbation radius");
    app.add_option("--gamma", gamma, "landscape-smoothing noise scale");
    app.add_option("--outer-lr", outer_lr, "beta");
    app.add_option("--lr-lr", lr_lr, "lambda (step size for the step size)");
    app.add_option("--iterations", iterations);
    app.add_option("--synthetic-batch", synthetic_batch, "0 = full batch");
    app.add_option("--eval-cadence", eval_cadence, "evaluate every k iterations (0 = off)");
    app.add_option("--init", init_mode, "real | noise")->check(CLI::IsMember({"real", "noise"}));
    app.add_option("--alpha0", alpha0, "initial inner step size");
  }

  CondenseConfig to_config(uint64_t seed) const {
    CondenseConfig c;
    c.inner_steps = inner_steps;
    c.expert_span = expert_span;
    c.max_start = max_start;
    c.truncate_index = iota;
    c.reuse_index = tau < 0 ? iota : static_cast<std::size_t>(tau);
    c.rho = rho;
    c.gamma = gamma;
    c.outer_lr = outer_lr;
    c.lr_lr = lr_lr;
    c.outer_iterations = iterations;
    if (synthetic_batch > 0) c.synthetic_batch_size = synthetic_batch;
    c.ipc = ipc;
    c.seed = seed;
    c.eval_cadence = eval_cadence;
    c.validate();
    return c;
  }

  json to_json() const {
    return {{"ipc", ipc},
            {"inner-steps", inner_steps},
            {"expert-span", expert_span},
            {"max-start", max_start},
            {"iota", iota},
            {"tau", tau},
            {"rho", rho},
            {"gamma", gamma},
            {"outer-lr", outer_lr},
            {"lr-lr", lr_lr},
            {"iterations", iterations},
            {"synthetic-batch", synthetic_batch},
            {"eval-cadence", eval_cadence},
            {"init", init_mode},
            {"alpha0", alpha0}};
  }
};

std::vector<ExpertTrajectory> load_expert_pool(const std::string& experts_dir) {
  std::vector<fs::path> paths;
  std::error_code ec;
  for (fs::directory_iterator it(experts_dir, ec), end; !ec && it != end; it.increment(ec)) {
    if (it->path().extension() == ".satmtrj") paths.push_back(it->path());
  }
  if (ec) throw IoError("cannot list experts directory: " + experts_dir);
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw ContractViolation("no .satmtrj files in " + experts_dir);
  std::vector<ExpertTrajectory> pool;
  pool.reserve(paths.size());
  for (const auto& p : paths) pool.push_back(load_trajectory(p));
  return pool;
}

int cmd_condense(const std::vector<std::string>& args) {
  auto app = std::unique_ptr<CLI::App>(make_app("learn a synthetic dataset by trajectory matching"));
  CommonFlags common;
  common.add_to(*app);
  CondenseFlags flags;
  flags.add_to(*app);
  std::string data_path, experts_dir, test_path;
  app->add_option("--data", data_path, "real dataset used for initialization")->required();
  app->add_option("--experts", experts_dir, "directory of .satmtrj files")->required();
  app->add_option("--test", test_path, "test dataset for --eval-cadence snapshots");

  return run_command("condense", args, *app, [&] {
    const RealDataset data = load_real(data_path);
    const std::vector<ExpertTrajectory> pool = load_expert_pool(experts_dir);
    CondenseConfig cfg = flags.to_config(common.seed);
    for (const auto& t : pool)
      if (t.horizon() < cfg.max_start + cfg.expert_span)
        throw ContractViolation("expert trajectory too short for max-start + expert-span");

    json params = flags.to_json();
    params["data"] = data_path;
    params["experts"] = experts_dir;
    params["seed"] = common.seed;
    // Provenance hashes the configuration and the content identity of the
    // inputs, never their paths, so reruns into other directories are
    // byte-identical.
    json hash_params = flags.to_json();
    hash_params["seed"] = common.seed;
    hash_params["dataset_id"] = data.id;
    json expert_ids = json::array();
    for (const auto& t : pool) expert_ids.push_back({{"dataset_id", t.dataset_id}, {"seed", t.seed}});
    hash_params["experts"] = expert_ids;
    const std::string config_hash = io::hex64(io::fnv1a64(hash_params.dump()));

    Rng init_rng(derive_seed(common.seed, "init-synthetic"));
    SyntheticDataset state = init_synthetic(
        data, cfg.ipc, flags.init_mode == "real" ? InitMode::real_samples : InitMode::gaussian_noise,
        init_rng, flags.alpha0);
    state.provenance = config_hash;

    std::optional<RealDataset> test;
    if (!test_path.empty()) test = load_real(test_path);
    std::string eval_trace = "iter,acc_mean,acc_std\n";

    Rng rng(derive_seed(common.seed, "condense"));
    std::vector<SharpnessRecord> log;
    log.reserve(cfg.outer_iterations);
    std::size_t done = 0;
    const std::size_t total = cfg.outer_iterations;
    while (done < total) {
      const std::size_t chunk =
          cfg.eval_cadence > 0 ? std::min(cfg.eval_cadence, total - done) : total;
      CondenseConfig part = cfg;
      part.outer_iterations = chunk;
      auto [next, records] = condense(part, pool, state, rng);
      for (auto& r : records) {
        r.iteration += done;
        log.push_back(r);
      }
      state = std::move(next);
      done += chunk;
      if (cfg.eval_cadence > 0 && test) {
        const EvalReport rep = train_eval(pool[0].spec, state, *test, 300, 3, common.seed);
        eval_trace += std::to_string(done) + "," + fmt17(rep.mean_accuracy) + "," +
                      fmt17(rep.std_accuracy) + "\n";
      }
    }
    state.provenance = config_hash;

    const fs::path out(common.out);
    save_synthetic(state, out / "synthetic.satmds");
    io::write_file(out / "sharpness.csv", sharpness_csv(log));
    std::vector<std::string> files{"synthetic.satmds", "sharpness.csv"};
    if (cfg.eval_cadence > 0 && test) {
      io::write_file(out / "eval_trace.csv", eval_trace);
      files.push_back("eval_trace.csv");
    }
    write_manifest(out, "condense", params, files,
                   {{"equivalence", cfg.mtt_equivalent() ? "mtt-equivalent" : "satm"},
                    {"config_hash", config_hash}});
    std::cout << (cfg.mtt_equivalent() ? "mtt-equivalent" : "satm") << " condensation: "
              << total << " iterations, final alpha " << fmt17(state.inner_lr) << "\n";
  });
}

// ---- eval / cross-eval ----

int cmd_eval(const std::vector<std::string>& args) {
  auto app = std::unique_ptr<CLI::App>(make_app("train on synthetic data, test on real data"));
  CommonFlags common;
  common.add_to(*app);
  std::string synthetic_list, test_path, arch = "softmax";
  std::size_t hidden = 32, epochs = 300, repeats = 10, jobs = 1;
  app->add_option("--synthetic", synthetic_list, "synthetic dataset(s), comma-separated")->required();
  app->add_option("--test", test_path)->required();
  app->add_option("--arch", arch);
  app->add_option("--hidden", hidden);
  app->add_option("--epochs", epochs);
  app->add_option("--repeats", repeats);
  app->add_option("--jobs", jobs);

  return run_command("eval", args, *app, [&] {
    const RealDataset test = load_real(test_path);
    std::vector<EvalReport> reports;
    json per_seed = json::object();
    for (const auto& path : split_list(synthetic_list)) {
      const SyntheticDataset synth = load_synthetic(path);
      const ModelSpec spec = parse_arch(arch, hidden, synth.dim(), synth.class_count);
      EvalReport rep = train_eval(spec, synth, test, epochs, repeats, common.seed, jobs);
      rep.synthetic_id = fs::path(path).filename().string() + ":" + synth.provenance;
      per_seed[rep.synthetic_id] = rep.per_seed;
      reports.push_back(std::move(rep));
    }
    const fs::path out(common.out);
    io::write_file(out / "eval.csv", eval_reports_csv(reports));
    io::write_file(out / "eval.json", json{{"per_seed", per_seed}}.dump(2) + "\n");
    json params{{"synthetic", synthetic_list}, {"test", test_path}, {"arch", arch},
                {"hidden", hidden},            {"epochs", epochs},  {"repeats", repeats},
                {"seed", common.seed}};
    write_manifest(out, "eval", params, {"eval.csv", "eval.json"});
    for (const auto& r : reports)
      std::cout << r.synthetic_id << " " << r.model_desc << ": acc " << fmt17(r.mean_accuracy)
                << " +- " << fmt17(r.std_accuracy) << "\n";
  });
}

int cmd_cross_eval(const std::vector<std::string>& args) {
  auto app = std::unique_ptr<CLI::App>(make_app("evaluate one synthetic set across architectures"));
  CommonFlags common;
  common.add_to(*app);
  std::string synthetic_path, test_path, archs = "softmax,mlp1:16,mlp1:64";
  std::size_t epochs = 300, repeats = 10, jobs = 1;
  app->add_option("--synthetic", synthetic_path)->required();
  app->add_option("--test", test_path)->required();
  app->add_option("--archs", archs, "comma-separated architecture list");
  app->add_option("--epochs", epochs);
  app->add_option("--repeats", repeats);
  app->add_option("--jobs", jobs);

  return run_command("cross-eval", args, *app, [&] {
    const SyntheticDataset synth = load_synthetic(synthetic_path);
    const RealDataset test = load_real(test_path);
    std::vector<ModelSpec> specs;
    for (const auto& a : split_list(archs))
      specs.push_back(parse_arch(a, 32, synth.dim(), synth.class_count));
    const auto reports = cross_arch_eval(specs, synth, test, epochs, repeats, common.seed, jobs);
    const fs::path out(common.out);
    io::write_file(out / "cross_eval.csv", eval_reports_csv(reports));
    json params{{"synthetic", synthetic_path}, {"test", test_path}, {"archs", archs},
                {"epochs", epochs},            {"repeats", repeats}, {"seed", common.seed}};
    write_manifest(out, "cross-eval", params, {"cross_eval.csv"});
    for (const auto& r : reports)
      std::cout << r.model_desc << ": acc " << fmt17(r.mean_accuracy) << " +- "
                << fmt17(r.std_accuracy) << "\n";
  });
}

// ---- continual ----

int cmd_continual(const std::vector<std::string>& args) {
  auto app = std::unique_ptr<CLI::App>(make_app("class-incremental evaluation with condensed memories"));
  CommonFlags common;
  common.add_to(*app);
  CondenseFlags flags;
  flags.iterations = 200;
  flags.ipc = 5;
  flags.add_to(*app);
  std::string data_path, test_path, arch = "softmax";
  std::size_t hidden = 32, tasks = 5, seeds_count = 5, eval_epochs = 300;
  std::size_t expert_count = 3, expert_epochs = 8, expert_batch = 32;
  double expert_step = 0.1;
  app->add_option("--data", data_path)->required();
  app->add_option("--test", test_path)->required();
  app->add_option("--arch", arch);
  app->add_option("--hidden", hidden);
  app->add_option("--tasks", tasks, "number of class-incremental stages");
  app->add_option("--seeds-count", seeds_count, "independent repetitions");
  app->add_option("--eval-epochs", eval_epochs);
  app->add_option("--expert-count", expert_count);
  app->add_option("--expert-epochs", expert_epochs);
  app->add_option("--expert-step", expert_step);
  app->add_option("--expert-batch", expert_batch);

  return run_command("continual", args, *app, [&] {
    const RealDataset data = load_real(data_path);
    const RealDataset test = load_real(test_path);
    if (tasks < 1 || data.class_count % tasks != 0)
      throw ContractViolation("continual: class count must divide evenly into --tasks");
    const std::size_t per_task = data.class_count / tasks;
    const Arch eval_arch = parse_arch(arch, hidden, data.dim(), std::max<std::size_t>(2, per_task)).arch;

    std::string csv = "variant,seed,stage,classes_seen,acc\n";
    std::string stages_condensed, stages_baseline;
    json protocols{{"condensed", json::object()}, {"random-real", json::object()}};
    std::vector<double> mean_condensed(tasks, 0.0), mean_baseline(tasks, 0.0);

    for (std::size_t s = 0; s < seeds_count; ++s) {
      const uint64_t run_seed = common.seed + s;
      std::vector<ContinualTask> condensed_tasks, baseline_tasks;
      for (std::size_t k = 0; k < tasks; ++k) {
        std::vector<int32_t> cls(per_task);
        for (std::size_t j = 0; j < per_task; ++j) cls[j] = static_cast<int32_t>(k * per_task + j);

        // Task-local dataset with labels remapped to 0..per_task-1.
        RealDataset task_data;
        task_data.class_count = per_task;
        task_data.split = data.split;
        task_data.id = data.id + "-task" + std::to_string(k);
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < data.size(); ++i)
          if (data.labels[i] >= cls.front() && data.labels[i] <= cls.back()) rows.push_back(i);
        task_data.features = Matrix(rows.size(), data.dim());
        task_data.labels.resize(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const double* from = data.features.row(rows[i]);
          std::copy(from, from + data.dim(), task_data.features.row(i));
          task_data.labels[i] = data.labels[rows[i]] - cls.front();
        }

        const ModelSpec spec = parse_arch(arch, hidden, data.dim(), per_task);
        std::vector<ExpertTrajectory> pool;
        for (std::size_t j = 0; j < expert_count; ++j)
          pool.push_back(train_expert(spec, task_data, expert_epochs, expert_step, expert_batch,
                                      derive_seed(run_seed, "continual-expert", k * 64 + j)));

        CondenseConfig cfg = flags.to_config(run_seed);
        Rng init_rng(derive_seed(run_seed, "continual-init", k));
        SyntheticDataset init =
            init_synthetic(task_data, flags.ipc, InitMode::real_samples, init_rng, flags.alpha0);
        Rng cond_rng(derive_seed(run_seed, "continual-condense", k));
        auto [memory, log] = condense(cfg, pool, init, cond_rng);
        condensed_tasks.push_back({cls, std::move(memory)});

        Rng base_rng(derive_seed(run_seed, "continual-baseline", k));
        SyntheticDataset baseline =
            init_synthetic(task_data, flags.ipc, InitMode::real_samples, base_rng, flags.alpha0);
        baseline_tasks.push_back({cls, std::move(baseline)});
      }

      const auto proto_c = continual_eval(condensed_tasks, test, eval_arch, hidden, eval_epochs,
                                          derive_seed(run_seed, "continual-eval"));
      const auto proto_b = continual_eval(baseline_tasks, test, eval_arch, hidden, eval_epochs,
                                          derive_seed(run_seed, "continual-eval"));
      auto append_stages = [&](std::string& out, const ContinualProtocol& proto) {
        std::string rows = proto.to_csv(run_seed);
        if (!out.empty()) rows = rows.substr(rows.find('\n') + 1);  // keep one header
        out += rows;
      };
      append_stages(stages_condensed, proto_c);
      append_stages(stages_baseline, proto_b);
      auto record_protocol = [&](const char* variant, const ContinualProtocol& proto) {
        json& slot = protocols[variant][std::to_string(run_seed)];
        slot["stage_accuracy"] = proto.stage_accuracy;
        slot["stage_task_accuracy"] = proto.stage_task_accuracy;
      };
      record_protocol("condensed", proto_c);
      record_protocol("random-real", proto_b);
      for (std::size_t k = 0; k < tasks; ++k) {
        csv += "condensed," + std::to_string(run_seed) + "," + std::to_string(k + 1) + "," +
               std::to_string((k + 1) * per_task) + "," + fmt17(proto_c.stage_accuracy[k]) + "\n";
        csv += "random-real," + std::to_string(run_seed) + "," + std::to_string(k + 1) + "," +
               std::to_string((k + 1) * per_task) + "," + fmt17(proto_b.stage_accuracy[k]) + "\n";
        mean_condensed[k] += proto_c.stage_accuracy[k];
        mean_baseline[k] += proto_b.stage_accuracy[k];
      }
    }
    for (std::size_t k = 0; k < tasks; ++k) {
      mean_condensed[k] /= static_cast<double>(seeds_count);
      mean_baseline[k] /= static_cast<double>(seeds_count);
      csv += "condensed,mean," + std::to_string(k + 1) + "," + std::to_string((k + 1) * per_task) +
             "," + fmt17(mean_condensed[k]) + "\n";
      csv += "random-real,mean," + std::to_string(k + 1) + "," + std::to_string((k + 1) * per_task) +
             "," + fmt17(mean_baseline[k]) + "\n";
    }

    const fs::path out(common.out);
    io::write_file(out / "continual.csv", csv);
    io::write_file(out / "continual_stages_condensed.csv", stages_condensed);
    io::write_file(out / "continual_stages_baseline.csv", stages_baseline);
    io::write_file(out / "continual.json", protocols.dump(2) + "\n");
    json params = flags.to_json();
    params["data"] = data_path;
    params["test"] = test_path;
    params["arch"] = arch;
    params["hidden"] = hidden;
    params["tasks"] = tasks;
    params["seeds-count"] = seeds_count;
    params["eval-epochs"] = eval_epochs;
    params["expert-count"] = expert_count;
    params["expert-epochs"] = expert_epochs;
    params["expert-step"] = expert_step;
    params["expert-batch"] = expert_batch;
    params["seed"] = common.seed;
    write_manifest(out, "continual", params,
                   {"continual.csv", "continual_stages_condensed.csv",
                    "continual_stages_baseline.csv", "continual.json"});
    std::cout << "final stage: condensed " << fmt17(mean_condensed.back()) << " vs random-real "
              << fmt17(mean_baseline.back()) << " (mean over " << seeds_count << " seeds)\n";
  });
}

// ---- bench ----

int cmd_bench(const std::vector<std::string>& args) {
  auto app = std::unique_ptr<CLI::App>(make_app("diagnostics and complexity benchmarks"));
  CommonFlags common;
  common.add_to(*app);
  std::string mode;
  std::size_t steps = 50, reps = 20, dim = 64, classes = 10, hidden = 32, ipc = 10;
  int64_t iota_opt = -1;
  double ridge = 0.5, alpha = 0.5;
  std::string iotas = "50,40,30,20,10,0", alphas = "0.01,0.05", rhos = "0.01,0.1";
  std::size_t seeds_count = 10, iterations = 200;
  app->add_option("--mode", mode, "hypergrad-error | divergence | timing | lr-grad-compare")
      ->required()
      ->check(CLI::IsMember({"hypergrad-error", "divergence", "timing", "lr-grad-compare"}));
  app->add_option("--steps", steps, "inner steps N");
  app->add_option("--reps", reps, "timing repetitions");
  app->add_option("--dim", dim);
  app->add_option("--classes", classes);
  app->add_option("--hidden", hidden);
  app->add_option("--ipc", ipc);
  app->add_option("--iota", iota_opt, "-1 = 2N/3");
  app->add_option("--ridge", ridge);
  app->add_option("--alpha", alpha, "inner step size for probes");
  app->add_option("--iotas", iotas, "truncation sweep list");
  app->add_option("--alphas", alphas, "divergence-probe step sizes");
  app->add_option("--rhos", rhos, "divergence-probe perturbation radii");
  app->add_option("--seeds-count", seeds_count);
  app->add_option("--iterations", iterations, "lr-grad-compare condensation length");

  return run_command("bench", args, *app, [&] {
    const fs::path out(common.out);
    json params{{"mode", mode}, {"seed", common.seed}};
    std::vector<std::string> files;

    if (mode == "hypergrad-error") {
      // Ridge-regularized logistic inner problem run to convergence; the
      // truncation error is measured against the full reverse-mode result.
      DiagnosticsReport merged;
      const auto iota_list = parse_sizes(iotas);
      for (std::size_t s = 0; s < seeds_count; ++s) {
        const uint64_t sd = common.seed + s;
        const RealDataset real = make_gaussian_mixture(3, 5, 2.0, 50, sd, "train");
        Rng rng(derive_seed(sd, "bench-hypergrad"));
        SyntheticDataset ds = init_synthetic(real, 1, InitMode::real_samples, rng, alpha);
        const ModelSpec spec = ModelSpec::softmax(5, 3);
        Segment seg;
        seg.theta_start = init_params(spec, sd);
        seg.theta_target.assign(spec.param_count(), 0.0);
        seg.delta = 1.0;
        const DiagnosticsReport rep =
            prop1_error_sweep(spec, ds, seg, steps, iota_list, ridge, sd);
        merged.convergence_warning = merged.convergence_warning || rep.convergence_warning;
        merged.truncation_errors.insert(merged.truncation_errors.end(),
                                        rep.truncation_errors.begin(), rep.truncation_errors.end());
      }
      io::write_file(out / "bench_hypergrad_error.csv", merged.to_csv());
      files.emplace_back("bench_hypergrad_error.csv");
      params["steps"] = steps;
      params["ridge"] = ridge;
      params["alpha"] = alpha;
      params["iotas"] = iotas;
      params["seeds-count"] = seeds_count;
      for (std::size_t iota : iota_list) {
        double mean = 0.0;
        std::size_t n = 0;
        for (const auto& r : merged.truncation_errors)
          if (r.iota == iota) {
            mean += r.err_l2;
            ++n;
          }
        std::cout << "iota " << iota << ": mean err " << fmt17(mean / static_cast<double>(n))
                  << "\n";
      }
      if (merged.convergence_warning)
        std::cerr << "warning: inner problem did not reach ||grad|| < 1e-6\n";
    } else if (mode == "divergence") {
      DiagnosticsReport merged;
      const std::size_t N = steps;
      std::vector<std::size_t> tau_list(N);
      for (std::size_t i = 0; i < N; ++i) tau_list[i] = i + 1;
      const auto alpha_list = parse_doubles(alphas);
      const RealDataset real = make_gaussian_mixture(3, 5, 2.0, 50, common.seed, "train");
      Rng rng(derive_seed(common.seed, "bench-divergence"));
      SyntheticDataset ds = init_synthetic(real, 2, InitMode::real_samples, rng, 0.05);
      const ModelSpec spec = ModelSpec::softmax(5, 3);
      const ParamVector theta0 = init_params(spec, common.seed);
      for (double rho : parse_doubles(rhos)) {
        Matrix eps(ds.images.rows, ds.images.cols);
        for (auto& v : eps.data) v = rng.normal();
        double norm = 0.0;
        for (double v : eps.data) norm += v * v;
        norm = std::sqrt(norm);
        for (auto& v : eps.data) v *= rho / norm;
        const auto rep = thm1_divergence_probe(spec, ds, theta0, eps, tau_list, alpha_list,
                                               common.seed);
        merged.sigma_hat = std::max(merged.sigma_hat, rep.sigma_hat);
        merged.divergence_probe.insert(merged.divergence_probe.end(), rep.divergence_probe.begin(),
                                       rep.divergence_probe.end());
      }
      io::write_file(out / "bench_divergence.csv", merged.to_csv());
      files.emplace_back("bench_divergence.csv");
      params["steps"] = steps;
      params["alphas"] = alphas;
      params["rhos"] = rhos;
      std::size_t violations = 0;
      for (const auto& r : merged.divergence_probe)
        if (r.div_l2 > r.bound + 1e-12) ++violations;
      std::cout << merged.divergence_probe.size() << " rows, " << violations
                << " triangle-bound violations, sigma_hat " << fmt17(merged.sigma_hat) << "\n";
    } else if (mode == "timing") {
      const std::size_t N = steps;
      const std::size_t iota = iota_opt < 0 ? 2 * N / 3 : static_cast<std::size_t>(iota_opt);
      const ModelSpec spec = ModelSpec::mlp(dim, hidden, classes);
      auto model = std::make_shared<CeInnerModel>(spec);
      Rng rng(derive_seed(common.seed, "bench-timing"));
      SyntheticDataset ds;
      ds.class_count = classes;
      ds.ipc = ipc;
      ds.inner_lr = 0.01;
      ds.images = Matrix(classes * ipc, dim);
      for (auto& v : ds.images.data) v = rng.normal();
      ds.labels.resize(classes * ipc);
      for (std::size_t i = 0; i < ds.labels.size(); ++i)
        ds.labels[i] = static_cast<int32_t>(i / ipc);
      Segment seg;
      seg.expert_span = 1;
      seg.theta_start = init_params(spec, common.seed);
      seg.theta_target = init_params(spec, common.seed + 1);
      double dl = 0.0;
      for (std::size_t j = 0; j < seg.theta_start.size(); ++j) {
        const double diff = seg.theta_start[j] - seg.theta_target[j];
        dl += diff * diff;
      }
      seg.delta = dl;

      CondenseConfig cfg;
      cfg.inner_steps = N;
      cfg.truncate_index = iota;
      cfg.reuse_index = iota;
      cfg.rho = 0.05;
      cfg.gamma = 0.01;
      cfg.outer_lr = 1.0;
      cfg.lr_lr = 0.0;
      cfg.outer_iterations = 1;

      const BatchSchedule sched = BatchSchedule::full(N, ds.size());
      auto naive_sam = [&] {
        const InnerRunRecord r1 = unroll_inner(model, seg.theta_start, ds, N, sched, 0);
        const Hypergradient h1 = rmd_hypergrad(r1, ds, seg);
        const EpsilonResult eps = compute_epsilon(h1.d_phi, cfg.rho);
        SyntheticDataset ds2 = ds;
        for (std::size_t k = 0; k < ds2.images.size(); ++k)
          ds2.images.data[k] += eps.epsilon.data[k];
        const InnerRunRecord r2 = unroll_inner(model, seg.theta_start, ds2, N, sched, 0);
        return rmd_hypergrad(r2, ds2, seg).grad_norm;
      };
      auto mtt = [&] {
        const InnerRunRecord r = unroll_inner(model, seg.theta_start, ds, N, sched, 0);
        return rmd_hypergrad(r, ds, seg).grad_norm;
      };
      auto satm_once = [&] {
        return satm_step_on_segment(ds, seg, model, cfg, rng).second.hypergrad_norm;
      };

      auto median_time = [&](const std::function<double()>& fn) {
        volatile double sink = fn();  // warmup
        std::vector<double> times;
        for (std::size_t r = 0; r < reps; ++r) {
          const auto t0 = std::chrono::steady_clock::now();
          sink = fn();
          const auto t1 = std::chrono::steady_clock::now();
          times.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        (void)sink;
        std::sort(times.begin(), times.end());
        return times[times.size() / 2];
      };

      const double t_satm = median_time(satm_once);
      const double t_naive = median_time(naive_sam);
      const double t_mtt = median_time(mtt);
      const std::size_t retained = N - iota + 2;

      // Measured per-outer-step counts: forward inner steps actually run and
      // inner steps differentiated through.
      const std::size_t satm_fwd = N + (N - iota), satm_diff = 2 * (N - iota);
      std::string csv = "method,median_seconds,reps,n_steps,iota,forward_steps,diff_steps,retained_states\n";
      csv += "satm," + fmt17(t_satm) + "," + std::to_string(reps) + "," + std::to_string(N) + "," +
             std::to_string(iota) + "," + std::to_string(satm_fwd) + "," +
             std::to_string(satm_diff) + "," + std::to_string(retained) + "\n";
      csv += "naive-sam," + fmt17(t_naive) + "," + std::to_string(reps) + "," + std::to_string(N) +
             ",0," + std::to_string(2 * N) + "," + std::to_string(2 * N) + "," +
             std::to_string(N + 1) + "\n";
      csv += "mtt," + fmt17(t_mtt) + "," + std::to_string(reps) + "," + std::to_string(N) + ",0," +
             std::to_string(N) + "," + std::to_string(N) + "," + std::to_string(N + 1) + "\n";
      io::write_file(out / "bench_timing.csv", csv);
      files.emplace_back("bench_timing.csv");
      params["steps"] = steps;
      params["reps"] = reps;
      params["dim"] = dim;
      params["classes"] = classes;
      params["hidden"] = hidden;
      params["ipc"] = ipc;
      params["iota"] = iota;
      std::cout << "satm " << fmt17(t_satm) << "s, naive-sam " << fmt17(t_naive) << "s, mtt "
                << fmt17(t_mtt) << "s; satm/naive ratio " << fmt17(t_satm / t_naive)
                << ", retained states " << retained << "\n";
    } else {  // lr-grad-compare
      const RealDataset real = make_gaussian_mixture(4, 10, 4.0, 200, common.seed, "train");
      const ModelSpec spec = ModelSpec::softmax(10, 4);
      std::vector<ExpertTrajectory> pool;
      for (std::size_t j = 0; j < 3; ++j)
        pool.push_back(train_expert(spec, real, 8, 0.1, 32, common.seed + 100 + j));
      CondenseConfig cfg;
      cfg.inner_steps = steps == 50 ? 20 : steps;  // default N for this mode is 20
      cfg.truncate_index = 0;
      cfg.reuse_index = 0;
      cfg.rho = 0.0;
      cfg.gamma = 0.0;
      cfg.outer_lr = 10.0;
      cfg.lr_lr = 1e-5;
      cfg.outer_iterations = iterations;
      Rng init_rng(derive_seed(common.seed, "init-synthetic"));
      SyntheticDataset init = init_synthetic(real, 1, InitMode::real_samples, init_rng, 0.02);
      Rng rng(derive_seed(common.seed, "condense"));
      auto [final_ds, log] = condense(cfg, pool, init, rng);
      (void)final_ds;

      std::string csv = "step,d_alpha_first_order,d_alpha_exact,cosine\n";
      std::size_t agree = 0;
      for (const auto& r : log) {
        const double denom = std::abs(r.d_alpha_first_order) * std::abs(r.d_alpha_exact);
        const double cosine =
            denom > 0.0 ? (r.d_alpha_first_order * r.d_alpha_exact) / denom : 0.0;
        if (cosine > 0.0 || (r.d_alpha_first_order == 0.0 && r.d_alpha_exact == 0.0)) ++agree;
        csv += std::to_string(r.iteration) + "," + fmt17(r.d_alpha_first_order) + "," +
               fmt17(r.d_alpha_exact) + "," + fmt17(cosine) + "\n";
      }
      const double agreement = static_cast<double>(agree) / static_cast<double>(log.size());
      io::write_file(out / "bench_lr_grad.csv", csv);
      files.emplace_back("bench_lr_grad.csv");
      params["iterations"] = iterations;
      params["sign_agreement"] = agreement;
      std::cout << "sign agreement " << fmt17(agreement) << " over " << log.size() << " steps\n";
    }
    write_manifest(out, "bench-" + mode, params, files);
  });
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  static const char* usage =
      "usage: satm <command> [options]\n"
      "commands:\n"
      "  gen-data       generate a Gaussian-mixture dataset or ingest IDX files\n"
      "  train-experts  train expert trajectories on real data\n"
      "  condense       learn a synthetic dataset by sharpness-aware trajectory matching\n"
      "  eval           train fresh models on synthetic data, test on real data\n"
      "  cross-eval     evaluate a synthetic set across architectures\n"
      "  continual      class-incremental evaluation with condensed memories\n"
      "  bench          diagnostics: hypergrad-error | divergence | timing | lr-grad-compare\n"
      "common options: --config PATH, --out DIR (or SATM_OUTPUT_DIR), --seed N\n";
  if (args.empty()) {
    std::cerr << usage;
    return kExitConfig;
  }
  const std::string& cmd = args[0];
  const std::vector<std::string> tail(args.begin() + 1, args.end());
  if (cmd == "gen-data") return cmd_gen_data(tail);
  if (cmd == "train-experts") return cmd_train_experts(tail);
  if (cmd == "condense") return cmd_condense(tail);
  if (cmd == "eval") return cmd_eval(tail);
  if (cmd == "cross-eval") return cmd_cross_eval(tail);
  if (cmd == "continual") return cmd_continual(tail);
  if (cmd == "bench") return cmd_bench(tail);
  if (cmd == "--help" || cmd == "-h" || cmd == "help") {
    std::cout << usage;
    return kExitOk;
  }
  std::cerr << "unknown command '" << cmd << "'\n" << usage;
  return kExitConfig;
}

}  // namespace satm
