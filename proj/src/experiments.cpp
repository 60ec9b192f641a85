#include "fedcluster/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fedcluster/objective.hpp"
#include "fedcluster/rng.hpp"

namespace fedcluster {

namespace {

using nlohmann::json;

constexpr std::uint64_t kRepStream = stream_tag("harness/replication");
constexpr std::uint64_t kOptStream = stream_tag("harness/optimizer");
constexpr std::uint64_t kLogisticStream = stream_tag("harness/logistic");

std::string format_double(double value) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.17g", value);
  return buffer;
}

void write_text_file(const std::string& path, const std::string& contents) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open output file " + path);
  out << contents;
  if (!out) throw ConfigError("failed writing " + path);
}

void check_keys(const json& object, const char* where,
                std::initializer_list<const char*> allowed) {
  for (const auto& item : object.items()) {
    bool known = false;
    for (const char* key : allowed)
      if (item.key() == key) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError(std::string("config: unknown key '") + item.key() +
                        "' in " + where);
  }
}

Vector parse_center(const json& value, const char* where) {
  if (value.is_number()) {
    Vector v(1);
    v[0] = value.get<double>();
    return v;  // broadcast to the full dimension later
  }
  if (!value.is_array())
    throw ConfigError(std::string("config: ") + where + " must be a number or array");
  Vector v(value.size());
  for (std::size_t r = 0; r < value.size(); ++r) v[r] = value[r].get<double>();
  return v;
}

struct TaskRunner {
  // Runs tasks 0..count-1 across workers; results must be written into
  // preallocated slots so output is independent of scheduling.
  template <typename Fn>
  static void run(int count, const Fn& fn) {
    const int workers = std::min(count, max_worker_threads());
    if (workers <= 1) {
      for (int t = 0; t < count; ++t) fn(t);
      return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          const int t = next.fetch_add(1);
          if (t >= count) return;
          try {
            fn(t);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!error) error = std::current_exception();
            return;
          }
        }
      });
    for (auto& thread : pool) thread.join();
    if (error) std::rethrow_exception(error);
  }
};

}  // namespace

ExperimentKind experiment_kind_from_string(const std::string& name) {
  if (name == "sim-table") return ExperimentKind::sim_table;
  if (name == "sim-curve") return ExperimentKind::sim_curve;
  if (name == "optimize-l2gd") return ExperimentKind::optimize_l2gd;
  if (name == "optimize-al2sgd") return ExperimentKind::optimize_al2sgd;
  if (name == "hlm-estimators") return ExperimentKind::hlm_estimators;
  if (name == "logistic-synthetic") return ExperimentKind::logistic_synthetic;
  throw ConfigError("config: unknown experiment kind '" + name + "'");
}

const char* experiment_kind_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::sim_table: return "sim-table";
    case ExperimentKind::sim_curve: return "sim-curve";
    case ExperimentKind::optimize_l2gd: return "optimize-l2gd";
    case ExperimentKind::optimize_al2sgd: return "optimize-al2sgd";
    case ExperimentKind::hlm_estimators: return "hlm-estimators";
    case ExperimentKind::logistic_synthetic: return "logistic-synthetic";
  }
  return "?";
}

HlmSpec ExperimentConfig::hlm_spec(int samples_per_client) const {
  HlmSpec spec = HlmSpec::uniform(hlm_clusters, hlm_clients_per_cluster, hlm_d,
                                  samples_per_client, hlm_sigma_bar_sq,
                                  hlm_sigma_cluster_sq, hlm_sigma_noise_sq);
  spec.design = hlm_design;
  if (hlm_theta_star_bar.size() == 1)
    spec.theta_star_bar.setConstant(hlm_theta_star_bar[0]);
  else if (hlm_theta_star_bar.size() > 1) {
    if (hlm_theta_star_bar.size() != hlm_d)
      throw ConfigError("config: hlm.theta_star_bar dimension mismatch");
    spec.theta_star_bar = hlm_theta_star_bar;
  }
  return spec;
}

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config: top level must be an object");
  check_keys(root, "the top level",
             {"schema_version", "kind", "seed", "replications", "out_dir",
              "m_grid", "hlm", "penalty", "optimizer", "estimators", "logistic"});
  if (!root.contains("schema_version") || root["schema_version"].get<int>() != 1)
    throw ConfigError("config: schema_version must be 1");
  if (!root.contains("kind")) throw ConfigError("config: missing kind");

  ExperimentConfig config;
  config.kind = experiment_kind_from_string(root["kind"].get<std::string>());
  if (config.kind == ExperimentKind::sim_curve) {
    config.replications = 50;
    config.optimizer.our_solver = OurSolver::closed_form;
  }
  if (root.contains("seed")) config.seed = root["seed"].get<std::uint64_t>();
  if (root.contains("replications")) {
    config.replications = root["replications"].get<int>();
    if (config.replications < 1)
      throw ConfigError("config: replications must be at least 1");
  }
  if (root.contains("out_dir")) config.out_dir = root["out_dir"].get<std::string>();
  if (root.contains("m_grid")) {
    config.m_grid.clear();
    for (const auto& v : root["m_grid"]) {
      const int m = v.get<int>();
      if (m < 1) throw ConfigError("config: m_grid entries must be >= 1");
      config.m_grid.push_back(m);
    }
    if (config.m_grid.empty()) throw ConfigError("config: empty m_grid");
  }
  if (root.contains("hlm")) {
    const json& hlm = root["hlm"];
    check_keys(hlm, "hlm",
               {"d", "clusters", "clients_per_cluster", "sigma_bar_sq",
                "sigma_cluster_sq", "sigma_noise_sq", "theta_star_bar", "design"});
    if (hlm.contains("d")) config.hlm_d = hlm["d"].get<int>();
    if (hlm.contains("clusters")) config.hlm_clusters = hlm["clusters"].get<int>();
    if (hlm.contains("clients_per_cluster"))
      config.hlm_clients_per_cluster = hlm["clients_per_cluster"].get<int>();
    if (hlm.contains("sigma_bar_sq"))
      config.hlm_sigma_bar_sq = hlm["sigma_bar_sq"].get<double>();
    if (hlm.contains("sigma_cluster_sq"))
      config.hlm_sigma_cluster_sq = hlm["sigma_cluster_sq"].get<double>();
    if (hlm.contains("sigma_noise_sq"))
      config.hlm_sigma_noise_sq = hlm["sigma_noise_sq"].get<double>();
    if (hlm.contains("theta_star_bar"))
      config.hlm_theta_star_bar = parse_center(hlm["theta_star_bar"], "hlm.theta_star_bar");
    if (hlm.contains("design")) {
      const std::string design = hlm["design"].get<std::string>();
      if (design == "gaussian")
        config.hlm_design = HlmSpec::Design::gaussian;
      else if (design == "identity")
        config.hlm_design = HlmSpec::Design::identity;
      else
        throw ConfigError("config: hlm.design must be gaussian or identity");
    }
  }
  if (root.contains("penalty")) {
    const json& pen = root["penalty"];
    check_keys(pen, "penalty", {"gamma", "lambda"});
    if (pen.contains("gamma")) config.penalty.gamma = pen["gamma"].get<double>();
    if (pen.contains("lambda")) config.penalty.lambda = pen["lambda"].get<double>();
  }
  if (root.contains("optimizer")) {
    const json& opt = root["optimizer"];
    check_keys(opt, "optimizer",
               {"mode", "p", "p0", "p_cluster", "eta", "iterations", "rho",
                "log_stride", "our_solver"});
    if (opt.contains("mode")) {
      config.optimizer.mode = opt["mode"].get<std::string>();
      if (config.optimizer.mode != "simple" && config.optimizer.mode != "three-branch" &&
          config.optimizer.mode != "auto")
        throw ConfigError("config: optimizer.mode must be simple, three-branch, or auto");
    }
    if (opt.contains("p")) config.optimizer.p = opt["p"].get<double>();
    if (opt.contains("p0")) config.optimizer.p0 = opt["p0"].get<double>();
    if (opt.contains("p_cluster"))
      config.optimizer.p_cluster = opt["p_cluster"].get<double>();
    if (opt.contains("eta")) config.optimizer.eta = opt["eta"].get<double>();
    if (opt.contains("iterations"))
      config.optimizer.iterations = opt["iterations"].get<long>();
    if (opt.contains("rho")) config.optimizer.rho = opt["rho"].get<double>();
    if (opt.contains("log_stride"))
      config.optimizer.log_stride = opt["log_stride"].get<long>();
    if (opt.contains("our_solver")) {
      const std::string solver = opt["our_solver"].get<std::string>();
      if (solver == "optimize")
        config.optimizer.our_solver = OurSolver::optimize;
      else if (solver == "closed-form")
        config.optimizer.our_solver = OurSolver::closed_form;
      else
        throw ConfigError("config: optimizer.our_solver must be optimize or closed-form");
    }
  }
  if (root.contains("estimators")) {
    config.estimators.clear();
    for (const auto& v : root["estimators"]) {
      const std::string name = v.get<std::string>();
      if (name != "lt" && name != "sm" && name != "sc" && name != "our" &&
          name != "gls" && name != "js")
        throw ConfigError("config: unknown estimator '" + name + "'");
      config.estimators.push_back(name);
    }
    if (config.estimators.empty()) throw ConfigError("config: empty estimator list");
  }
  if (root.contains("logistic")) {
    const json& lg = root["logistic"];
    check_keys(lg, "logistic",
               {"clusters", "clients_per_cluster", "rows_per_client", "dim",
                "center_spread_sq", "cluster_spread_sq", "ridge", "train_fraction",
                "theta_star_bar"});
    if (lg.contains("clusters")) config.logistic.clusters = lg["clusters"].get<int>();
    if (lg.contains("clients_per_cluster"))
      config.logistic.clients_per_cluster = lg["clients_per_cluster"].get<int>();
    if (lg.contains("rows_per_client"))
      config.logistic.rows_per_client = lg["rows_per_client"].get<int>();
    if (lg.contains("dim")) config.logistic.dim = lg["dim"].get<int>();
    if (lg.contains("center_spread_sq"))
      config.logistic.center_spread_sq = lg["center_spread_sq"].get<double>();
    if (lg.contains("cluster_spread_sq"))
      config.logistic.cluster_spread_sq = lg["cluster_spread_sq"].get<double>();
    if (lg.contains("ridge")) config.logistic.ridge = lg["ridge"].get<double>();
    if (lg.contains("train_fraction"))
      config.logistic.train_fraction = lg["train_fraction"].get<double>();
    if (lg.contains("theta_star_bar"))
      config.logistic.theta_star_bar =
          parse_center(lg["theta_star_bar"], "logistic.theta_star_bar");
  }
  return config;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

int max_worker_threads() {
  if (const char* env = std::getenv("FEDCLUSTER_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

namespace {

struct ErrorRow {
  std::string method;
  int m = 0;
  int rep = 0;     // 1-based in output
  int client = 0;  // 1-based in output
  double sq_error = 0.0;
};

// `our` via the simulation protocol: convert the multi-task tuning to the
// mixing form and run the simple schedule from zero.
EstimatorResult our_by_optimizer(const HlmSample& sample,
                                 const ExperimentConfig& config,
                                 std::uint64_t run_seed) {
  const LossSet losses = make_quadratic_losses(sample);
  const PenaltyConfig pen = PenaltyConfig::uniform_from_lambda(
      sample.topo, config.penalty.gamma, config.penalty.lambda);
  SchedulerConfig sched;
  sched.mode = ScheduleMode::simple;
  sched.p0 = config.optimizer.p;
  sched.eta = config.optimizer.eta;
  sched.iterations = config.optimizer.iterations;
  sched.seed = run_seed;
  const L2gdResult run = run_async_l2gd(sample.topo, pen, losses, sched);

  EstimatorResult result;
  result.method = EstimatorTag::our;
  const int n = sample.topo.n_clients();
  result.clients.resize(n);
  result.theta_hat.resize(n);
  result.sq_error.resize(n);
  for (int i = 0; i < n; ++i) {
    result.clients[i] = i;
    result.theta_hat[i] = run.theta.client(i);
    result.sq_error[i] = (result.theta_hat[i] - sample.theta_star[i]).squaredNorm();
  }
  return result;
}

EstimatorResult our_estimates(const HlmSample& sample, const ExperimentConfig& config,
                              std::uint64_t run_seed) {
  if (config.optimizer.our_solver == OurSolver::closed_form) {
    const PenaltyConfig pen = PenaltyConfig::uniform_from_lambda(
        sample.topo, config.penalty.gamma, config.penalty.lambda);
    return solve_hlm_closed_form(sample, pen);
  }
  return our_by_optimizer(sample, config, run_seed);
}

std::vector<ErrorRow> run_one_sim_rep(const ExperimentConfig& config, int m, int rep,
                                      const std::vector<std::string>& methods) {
  const std::uint64_t rep_seed =
      derive_seed(config.seed, kRepStream,
                  static_cast<std::uint64_t>(rep) * 1000003ULL +
                      static_cast<std::uint64_t>(m));
  const HlmSample sample = generate_hlm(config.hlm_spec(m), rep_seed);

  std::vector<ErrorRow> rows;
  auto emit = [&](const EstimatorResult& result) {
    for (std::size_t e = 0; e < result.clients.size(); ++e)
      rows.push_back({estimator_name(result.method), m, rep + 1,
                      result.clients[e] + 1, result.sq_error[e]});
  };
  for (const std::string& method : methods) {
    if (method == "lt") emit(estimate_local(sample));
    else if (method == "sm") emit(estimate_single_model(sample));
    else if (method == "sc") emit(estimate_single_cluster_cv(sample, default_sc_grid()));
    else if (method == "our") emit(our_estimates(sample, config, rep_seed));
    else if (method == "gls") {
      for (int i = 0; i < sample.topo.n_clients(); ++i)
        emit(estimate_gls(sample, sample.spec, i));
    } else if (method == "js") emit(estimate_james_stein(sample));
    else throw ConfigError("unknown estimator '" + method + "'");
  }
  return rows;
}

SimSummary summarize_rows(const std::vector<ErrorRow>& rows, const std::string& csv_path) {
  // Mean/SD over (client, rep) of the l2 distance; max is the per-rep
  // maximum averaged over reps; the mean squared distance rides along.
  struct Accumulator {
    std::vector<double> distances;
    std::map<int, double> rep_max;
    double sq_sum = 0.0;
  };
  std::map<std::pair<std::string, int>, Accumulator> groups;
  for (const ErrorRow& row : rows) {
    Accumulator& acc = groups[{row.method, row.m}];
    const double dist = std::sqrt(row.sq_error);
    acc.distances.push_back(dist);
    acc.sq_sum += row.sq_error;
    auto [it, inserted] = acc.rep_max.try_emplace(row.rep, dist);
    if (!inserted) it->second = std::max(it->second, dist);
  }
  SimSummary summary;
  summary.csv_path = csv_path;
  for (const auto& [key, acc] : groups) {
    SummaryRow row;
    row.method = key.first;
    row.m = key.second;
    const double count = static_cast<double>(acc.distances.size());
    double mean = 0.0;
    for (double v : acc.distances) mean += v;
    mean /= count;
    double var = 0.0;
    for (double v : acc.distances) var += (v - mean) * (v - mean);
    row.avg_dist = mean;
    row.sd_dist = count > 1 ? std::sqrt(var / (count - 1)) : 0.0;
    row.avg_sq = acc.sq_sum / count;
    double max_sum = 0.0;
    for (const auto& [rep, value] : acc.rep_max) max_sum += value;
    row.max_dist = max_sum / static_cast<double>(acc.rep_max.size());
    summary.rows.push_back(row);
  }
  return summary;
}

SimSummary run_sim_kind(const ExperimentConfig& config, const std::string& csv_name,
                        bool with_m_column) {
  const std::vector<std::string>& methods = config.estimators;
  const int n_tasks = static_cast<int>(config.m_grid.size()) * config.replications;
  std::vector<std::vector<ErrorRow>> results(n_tasks);
  TaskRunner::run(n_tasks, [&](int task) {
    const int m_index = task / config.replications;
    const int rep = task % config.replications;
    results[task] = run_one_sim_rep(config, config.m_grid[m_index], rep, methods);
  });

  std::vector<ErrorRow> rows;
  for (const auto& chunk : results) rows.insert(rows.end(), chunk.begin(), chunk.end());

  std::ostringstream csv;
  csv << (with_m_column ? "method,m,rep,client,sq_error\n"
                        : "method,rep,client,sq_error\n");
  for (const ErrorRow& row : rows) {
    csv << row.method << ',';
    if (with_m_column) csv << row.m << ',';
    csv << row.rep << ',' << row.client << ',' << format_double(row.sq_error)
        << '\n';
  }
  const std::string csv_path = config.out_dir + "/" + csv_name;
  write_text_file(csv_path, csv.str());
  return summarize_rows(rows, csv_path);
}

}  // namespace

SimSummary run_sim_table(const ExperimentConfig& config) {
  return run_sim_kind(config, "sim_table.csv", true);
}

SimSummary run_sim_curve(const ExperimentConfig& config) {
  ExperimentConfig curve = config;
  return run_sim_kind(curve, "sim_curve.csv", true);
}

SimSummary run_hlm_estimators(const ExperimentConfig& config) {
  ExperimentConfig single = config;
  if (single.m_grid.size() != 1)
    single.m_grid = {config.m_grid.front()};
  return run_sim_kind(single, "hlm_estimators.csv", false);
}

OptimizeSummary run_optimizer_experiment(const ExperimentConfig& config) {
  const int m = config.m_grid.front();
  const HlmSample sample = generate_hlm(config.hlm_spec(m),
                                        derive_seed(config.seed, kOptStream));
  const LossSet losses = make_quadratic_losses(sample);
  const PenaltyConfig pen = PenaltyConfig::uniform_from_lambda(
      sample.topo, config.penalty.gamma, config.penalty.lambda);
  const SmoothnessProfile profile = smoothness_profile(sample.topo, pen, losses);
  const bool accelerated = config.kind == ExperimentKind::optimize_al2sgd;

  SchedulerConfig sched;
  if (config.optimizer.mode == "auto") {
    sched = accelerated ? tune_al2sgd_schedule(profile, sample.topo.n_clusters())
                        : tune_schedule(profile, sample.topo.n_clusters());
  } else if (config.optimizer.mode == "three-branch") {
    sched.mode = ScheduleMode::three_branch;
    sched.p0 = config.optimizer.p0;
    sched.p.assign(sample.topo.n_clusters(), config.optimizer.p_cluster);
    sched.tau.resize(sample.topo.n_clusters());
    for (int j = 0; j < sample.topo.n_clusters(); ++j)
      sched.tau[j] = optimal_tau(sched.p0, sched.p[j]);
    sched.eta = config.optimizer.eta;
  } else {
    throw ConfigError("optimize experiments need optimizer.mode auto or three-branch");
  }
  sched.iterations = config.optimizer.iterations;
  sched.seed = derive_seed(config.seed, kOptStream, 1);

  const ParameterStack theta_hat = reference_minimizer(sample.topo, pen, losses);

  OptimizeSummary summary;
  summary.p0 = sched.p0;
  summary.p_cluster = sched.p.empty() ? 0.0 : sched.p.front();
  summary.tau = sched.tau.empty() ? 0.0 : sched.tau.front();
  summary.eta = sched.eta;
  summary.script_l = expected_smoothness(
      sample.topo, pen, losses, sched,
      accelerated ? SmoothnessKind::component : SmoothnessKind::full_gradient);
  summary.sigma_sq = residual_variance(theta_hat, sample.topo, pen, losses, sched);

  const long stride = std::max<long>(1, config.optimizer.log_stride);
  TrajectoryRecord trajectory;
  CommLog comm;
  if (accelerated) {
    Al2sgdResult run =
        run_async_al2sgd_plus(sample.topo, pen, losses, sched,
                              config.optimizer.rho, nullptr, &theta_hat, stride);
    trajectory = std::move(run.trajectory);
    comm = std::move(run.comm);
  } else {
    L2gdResult run = run_async_l2gd(sample.topo, pen, losses, sched, &theta_hat, stride);
    trajectory = std::move(run.trajectory);
    comm = std::move(run.comm);
  }

  std::ostringstream csv;
  csv << "iter,dist_sq,objective,between_rounds,within_rounds_json\n";
  for (std::size_t r = 0; r < trajectory.objective_iters.size(); ++r) {
    const long t = trajectory.objective_iters[r];
    csv << t << ',' << format_double(trajectory.dist_sq[t]) << ','
        << format_double(trajectory.objective_values[r]) << ','
        << trajectory.between_rounds_at[r] << ",\"[";
    const auto& within = trajectory.within_rounds_at[r];
    for (std::size_t j = 0; j < within.size(); ++j) {
      if (j) csv << ',';
      csv << within[j];
    }
    csv << "]\"\n";
  }
  summary.csv_path = config.out_dir + "/" +
                     (accelerated ? "optimize_al2sgd.csv" : "optimize_l2gd.csv");
  write_text_file(summary.csv_path, csv.str());

  summary.between_rounds = comm.between_cluster_rounds;
  summary.within_rounds = comm.within_cluster_rounds;
  summary.local_steps = comm.local_steps;
  summary.final_dist_sq = trajectory.dist_sq.back();
  summary.final_objective = trajectory.objective_values.back();
  return summary;
}

double clipped_cross_entropy(const Vector& theta, const Matrix& X, const Vector& y) {
  // Deliberately evaluated through the plain probability so a saturated
  // prediction against the opposite label overflows and triggers the clip.
  double total = 0.0;
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const double z = X.row(r).dot(theta);
    const double p = 1.0 / (1.0 + std::exp(-z));
    total += -(y[r] * std::log(p) + (1.0 - y[r]) * std::log(1.0 - p));
  }
  const double mean = total / static_cast<double>(X.rows());
  if (!std::isfinite(mean) || mean > 100.0) return 100.0;
  return mean;
}

double logistic_accuracy(const Vector& theta, const Matrix& X, const Vector& y) {
  long correct = 0;
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const double predicted = X.row(r).dot(theta) >= 0.0 ? 1.0 : 0.0;
    if (predicted == y[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(X.rows());
}

Vector fit_logistic_newton(const Matrix& X, const Vector& y, double ridge,
                           int iterations) {
  const int d = static_cast<int>(X.cols());
  const double n = static_cast<double>(X.rows());
  Vector theta = Vector::Zero(d);
  for (int it = 0; it < iterations; ++it) {
    const Vector z = X * theta;
    Vector residual(X.rows());
    Vector weight(X.rows());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      const double p = 1.0 / (1.0 + std::exp(-z[r]));
      residual[r] = p - y[r];
      weight[r] = std::max(p * (1.0 - p), 1e-10);
    }
    Vector grad = X.transpose() * residual / n + ridge * theta;
    if (grad.norm() <= 1e-12) break;
    Matrix hessian = X.transpose() * weight.asDiagonal() * X / n;
    hessian.diagonal().array() += ridge + 1e-12;
    theta -= hessian.ldlt().solve(grad);
  }
  return theta;
}

namespace {

struct LogisticRow {
  std::string method;
  int rep = 0;
  int client = 0;
  double cross_entropy = 0.0;
  double accuracy = 0.0;
};

struct LogisticInstance {
  NetworkTopology topo;
  std::vector<Matrix> train_x, test_x;
  std::vector<Vector> train_y, test_y;
};

LogisticInstance generate_logistic(const LogisticSettings& settings,
                                   std::uint64_t seed) {
  const int k = settings.clusters;
  const int c = settings.clients_per_cluster;
  const int d = settings.dim;
  const int rows = settings.rows_per_client;
  const int train_rows =
      std::max(1, std::min(rows - 1, static_cast<int>(std::lround(
                                         settings.train_fraction * rows))));
  Vector center = settings.theta_star_bar.size() == d
                      ? settings.theta_star_bar
                      : Vector::Zero(d);

  LogisticInstance instance{NetworkTopology::uniform(k, c), {}, {}, {}, {}};
  const int n = k * c;
  instance.train_x.resize(n);
  instance.test_x.resize(n);
  instance.train_y.resize(n);
  instance.test_y.resize(n);

  Rng center_rng(derive_seed(seed, stream_tag("logistic/centers")));
  std::vector<Vector> cluster_centers(k);
  for (int j = 0; j < k; ++j) {
    cluster_centers[j] = center;
    for (int r = 0; r < d; ++r)
      cluster_centers[j][r] += std::sqrt(settings.center_spread_sq) * center_rng.normal();
  }
  for (int j = 0; j < k; ++j)
    for (int i : instance.topo.cluster(j)) {
      Rng rng(derive_seed(seed, stream_tag("logistic/client"), i));
      Vector theta = cluster_centers[j];
      for (int r = 0; r < d; ++r)
        theta[r] += std::sqrt(settings.cluster_spread_sq) * rng.normal();
      Matrix X(rows, d);
      Vector y(rows);
      for (int r = 0; r < rows; ++r) {
        X(r, 0) = 1.0;  // intercept
        for (int cidx = 1; cidx < d; ++cidx) X(r, cidx) = rng.normal();
        const double p = 1.0 / (1.0 + std::exp(-X.row(r).dot(theta)));
        y[r] = rng.bernoulli(p) ? 1.0 : 0.0;
      }
      instance.train_x[i] = X.topRows(train_rows);
      instance.train_y[i] = y.head(train_rows);
      instance.test_x[i] = X.bottomRows(rows - train_rows);
      instance.test_y[i] = y.tail(rows - train_rows);
    }
  return instance;
}

}  // namespace

LogisticSummary run_logistic_synthetic(const ExperimentConfig& config) {
  const LogisticSettings& settings = config.logistic;
  std::vector<std::vector<LogisticRow>> results(config.replications);

  TaskRunner::run(config.replications, [&](int rep) {
    const std::uint64_t rep_seed =
        derive_seed(config.seed, kLogisticStream, static_cast<std::uint64_t>(rep));
    const LogisticInstance instance = generate_logistic(settings, rep_seed);
    const int n = instance.topo.n_clients();

    std::vector<Vector> lt(n), sm(n);
    Matrix pooled_x(0, settings.dim);
    Vector pooled_y(0);
    {
      Eigen::Index total = 0;
      for (int i = 0; i < n; ++i) total += instance.train_x[i].rows();
      pooled_x.resize(total, settings.dim);
      pooled_y.resize(total);
      Eigen::Index at = 0;
      for (int i = 0; i < n; ++i) {
        pooled_x.middleRows(at, instance.train_x[i].rows()) = instance.train_x[i];
        pooled_y.segment(at, instance.train_y[i].size()) = instance.train_y[i];
        at += instance.train_x[i].rows();
      }
    }
    const Vector pooled_fit =
        fit_logistic_newton(pooled_x, pooled_y, settings.ridge);
    for (int i = 0; i < n; ++i) {
      lt[i] = fit_logistic_newton(instance.train_x[i], instance.train_y[i],
                                  settings.ridge);
      sm[i] = pooled_fit;
    }

    // `our`: the simple schedule on the multi-cluster logistic objective.
    LossSet losses;
    losses.reserve(n);
    for (int i = 0; i < n; ++i) {
      ClientDataset data;
      data.X = instance.train_x[i];
      data.y = instance.train_y[i];
      data.binary_labels = true;
      losses.push_back(logistic_loss_oracle(std::move(data), settings.ridge));
    }
    const PenaltyConfig pen = PenaltyConfig::uniform_from_lambda(
        instance.topo, config.penalty.gamma, config.penalty.lambda);
    SchedulerConfig sched;
    sched.mode = ScheduleMode::simple;
    sched.p0 = config.optimizer.p;
    sched.eta = config.optimizer.eta;
    sched.iterations = config.optimizer.iterations;
    sched.seed = derive_seed(rep_seed, stream_tag("logistic/run"));
    const L2gdResult run = run_async_l2gd(instance.topo, pen, losses, sched);

    std::vector<LogisticRow>& rows = results[rep];
    auto emit = [&](const char* method, const std::vector<Vector>& estimates) {
      for (int i = 0; i < n; ++i)
        rows.push_back({method, rep + 1, i + 1,
                        clipped_cross_entropy(estimates[i], instance.test_x[i],
                                              instance.test_y[i]),
                        logistic_accuracy(estimates[i], instance.test_x[i],
                                          instance.test_y[i])});
    };
    std::vector<Vector> ours(n);
    for (int i = 0; i < n; ++i) ours[i] = run.theta.client(i);
    emit("lt", lt);
    emit("sm", sm);
    emit("our", ours);
  });

  std::vector<LogisticRow> rows;
  for (const auto& chunk : results) rows.insert(rows.end(), chunk.begin(), chunk.end());

  std::ostringstream csv;
  csv << "method,rep,client,cross_entropy,accuracy\n";
  for (const LogisticRow& row : rows)
    csv << row.method << ',' << row.rep << ',' << row.client << ','
        << format_double(row.cross_entropy) << ',' << format_double(row.accuracy)
        << '\n';

  LogisticSummary summary;
  summary.csv_path = config.out_dir + "/logistic_synthetic.csv";
  write_text_file(summary.csv_path, csv.str());

  for (const char* method : {"lt", "sm", "our"}) {
    std::vector<double> ce;
    double acc_sum = 0.0;
    for (const LogisticRow& row : rows)
      if (row.method == method) {
        ce.push_back(row.cross_entropy);
        acc_sum += row.accuracy;
      }
    if (ce.empty()) continue;
    std::sort(ce.begin(), ce.end());
    LogisticSummaryRow out;
    out.method = method;
    double mean = 0.0;
    for (double v : ce) mean += v;
    mean /= static_cast<double>(ce.size());
    double var = 0.0;
    for (double v : ce) var += (v - mean) * (v - mean);
    out.avg_ce = mean;
    out.sd_ce = ce.size() > 1 ? std::sqrt(var / (ce.size() - 1.0)) : 0.0;
    auto quantile = [&](double q) {
      const double pos = q * (ce.size() - 1);
      const std::size_t lo = static_cast<std::size_t>(pos);
      const std::size_t hi = std::min(lo + 1, ce.size() - 1);
      return ce[lo] + (pos - lo) * (ce[hi] - ce[lo]);
    };
    out.q25 = quantile(0.25);
    out.q50 = quantile(0.50);
    out.q75 = quantile(0.75);
    out.max_ce = ce.back();
    out.avg_accuracy = acc_sum / static_cast<double>(ce.size());
    summary.rows.push_back(out);
  }
  return summary;
}

std::string format_table(const SimSummary& summary) {
  std::vector<int> ms;
  for (const SummaryRow& row : summary.rows)
    if (std::find(ms.begin(), ms.end(), row.m) == ms.end()) ms.push_back(row.m);
  std::sort(ms.begin(), ms.end());
  const char* method_order[] = {"lt", "sm", "sc", "our", "gls", "js"};

  std::ostringstream out;
  char line[256];
  out << "method";
  for (int m : ms) {
    std::snprintf(line, sizeof(line), " | m=%-5d avg (+/- sd)      max    ", m);
    out << line;
  }
  out << '\n';
  for (const char* method : method_order) {
    bool any = false;
    std::ostringstream row_text;
    row_text << method;
    row_text << std::string(6 - std::min<std::size_t>(6, std::strlen(method)), ' ');
    for (int m : ms) {
      const SummaryRow* found = nullptr;
      for (const SummaryRow& row : summary.rows)
        if (row.method == method && row.m == m) found = &row;
      if (found) {
        any = true;
        std::snprintf(line, sizeof(line), " | %8.3f (+/- %6.3f) %8.3f",
                      found->avg_dist, found->sd_dist, found->max_dist);
        row_text << line;
      } else {
        row_text << " |        -                    -  ";
      }
    }
    if (any) out << row_text.str() << '\n';
  }
  return out.str();
}

std::string format_table(const LogisticSummary& summary) {
  std::ostringstream out;
  out << "method |   avg (+/- sd)        25%      50%      75%      max |  acc\n";
  char line[256];
  for (const LogisticSummaryRow& row : summary.rows) {
    std::snprintf(line, sizeof(line),
                  "%-6s | %6.3f (+/- %6.3f) %8.3f %8.3f %8.3f %8.3f | %5.3f\n",
                  row.method.c_str(), row.avg_ce, row.sd_ce, row.q25, row.q50,
                  row.q75, row.max_ce, row.avg_accuracy);
    out << line;
  }
  return out.str();
}

std::string report_from_csv(const std::string& csv_path) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) throw ConfigError("report: cannot open " + csv_path);
  std::string header;
  std::getline(in, header);
  const bool with_m = header.rfind("method,m,", 0) == 0;
  if (!with_m && header.rfind("method,rep,", 0) != 0)
    throw ConfigError("report: unrecognized CSV schema in " + csv_path);

  std::vector<ErrorRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    ErrorRow row;
    std::string token;
    std::getline(fields, row.method, ',');
    if (with_m) {
      std::getline(fields, token, ',');
      row.m = std::stoi(token);
    }
    std::getline(fields, token, ',');
    row.rep = std::stoi(token);
    std::getline(fields, token, ',');
    row.client = std::stoi(token);
    std::getline(fields, token, ',');
    row.sq_error = std::stod(token);
    rows.push_back(row);
  }
  return format_table(summarize_rows(rows, csv_path));
}

}  // namespace fedcluster
