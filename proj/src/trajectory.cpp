#include "satm/trajectory.hpp"

#include <cmath>

#include "json.hpp"
#include "satm/errors.hpp"
#include "satm/io.hpp"
#include "satm/kernels.hpp"

namespace satm {

using nlohmann::json;

void ExpertTrajectory::validate() const {
  spec.validate();
  if (checkpoints.empty()) throw ContractViolation("ExpertTrajectory: no checkpoints");
  for (const auto& c : checkpoints)
    if (c.size() != spec.param_count())
      throw ContractViolation("ExpertTrajectory: checkpoint length mismatch");
}

ExpertTrajectory train_expert(const ModelSpec& spec, const RealDataset& data, std::size_t epochs,
                              double step_size, std::size_t batch_size, uint64_t seed) {
  if (epochs < 1) throw ContractViolation("train_expert: epochs must be >= 1");
  if (!(step_size > 0.0)) throw ContractViolation("train_expert: step_size must be positive");
  if (batch_size < 1) throw ContractViolation("train_expert: batch_size must be >= 1");
  data.validate();
  if (data.dim() != spec.input_dim || data.class_count != spec.classes)
    throw ContractViolation("train_expert: dataset does not match spec");

  ExpertTrajectory traj;
  traj.spec = spec;
  traj.dataset_id = data.id;
  traj.seed = seed;
  traj.train_config = {step_size, batch_size, epochs};

  ParamVector theta = init_params(spec, seed);
  traj.checkpoints.push_back(theta);
  const LabeledBatch full = LabeledBatch::of(data.features, data.labels);
  const double loss_start = ce_loss(spec, theta, full);

  const std::size_t n = data.size();
  Rng shuffle_rng(derive_seed(seed, "expert-shuffle"));
  Matrix batch_x;
  std::vector<int32_t> batch_y;
  ParamVector grad;

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::vector<uint32_t> perm = shuffle_rng.permutation(n);
    for (std::size_t s = 0; s < n; s += batch_size) {
      const std::size_t m = std::min(batch_size, n - s);
      batch_x = Matrix(m, data.dim());
      batch_y.resize(m);
      for (std::size_t k = 0; k < m; ++k) {
        const uint32_t src = perm[s + k];
        const double* from = data.features.row(src);
        std::copy(from, from + data.dim(), batch_x.row(k));
        batch_y[k] = data.labels[src];
      }
      ce_grad(spec, theta, LabeledBatch::of(batch_x, batch_y), grad);
      kernels::axpy(theta.data(), -step_size, grad.data(), theta.size());
    }
    for (double t : theta)
      if (!std::isfinite(t))
        throw NumericError("train_expert: diverged at epoch " + std::to_string(epoch + 1));
    traj.checkpoints.push_back(theta);
  }

  const double loss_end = ce_loss(spec, theta, full);
  if (!(loss_end <= loss_start))
    throw NumericError("train_expert: final loss " + std::to_string(loss_end) +
                       " above initial " + std::to_string(loss_start));
  traj.loss_initial = loss_start;
  traj.loss_final = loss_end;
  return traj;
}

namespace {

constexpr std::string_view kTrajMagic = "SATMTRJ1";

json spec_to_json(const ModelSpec& s) {
  json j{{"arch", s.arch == Arch::softmax_regression ? "softmax_regression" : "mlp1"},
         {"d", s.input_dim},
         {"C", s.classes},
         {"activation", "tanh"}};
  if (s.arch == Arch::mlp1) j["h"] = s.hidden;
  return j;
}

ModelSpec spec_from_json(const json& j) {
  const std::string arch = j.at("arch").get<std::string>();
  if (j.at("activation").get<std::string>() != "tanh")
    throw FormatError("trajectory: unsupported activation");
  if (arch == "softmax_regression")
    return ModelSpec::softmax(j.at("d").get<std::size_t>(), j.at("C").get<std::size_t>());
  if (arch == "mlp1")
    return ModelSpec::mlp(j.at("d").get<std::size_t>(), j.at("h").get<std::size_t>(),
                          j.at("C").get<std::size_t>());
  throw FormatError("trajectory: unknown arch " + arch);
}

}  // namespace

void save_trajectory(const ExpertTrajectory& traj, const std::filesystem::path& path) {
  traj.validate();
  json header{{"version", 1},
              {"spec", spec_to_json(traj.spec)},
              {"dataset_id", traj.dataset_id},
              {"seed", traj.seed},
              {"epochs_per_checkpoint", traj.epochs_per_checkpoint},
              {"train_config",
               {{"step_size", traj.train_config.step_size},
                {"batch_size", traj.train_config.batch_size},
                {"epochs", traj.train_config.epochs}}},
              {"loss_initial", traj.loss_initial},
              {"loss_final", traj.loss_final},
              {"T", traj.horizon()}};
  std::string out;
  out.append(kTrajMagic);
  const std::string h = header.dump();
  io::put_u64(out, h.size());
  out.append(h);
  for (const auto& ckpt : traj.checkpoints) {
    io::put_u64(out, ckpt.size());
    for (double v : ckpt) io::put_f64(out, v);
  }
  io::write_file(path, out);
  // Human-readable sidecar copy of the header.
  io::write_file(path.string() + ".json", header.dump(2) + "\n");
}

ExpertTrajectory load_trajectory(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  io::ByteReader r(bytes);
  if (r.read_bytes(kTrajMagic.size()) != kTrajMagic) throw FormatError("trajectory: bad magic");
  const uint64_t hlen = r.read_u64();
  if (hlen > r.remaining()) throw FormatError("trajectory: truncated header");
  const json header = json::parse(r.read_bytes(hlen), nullptr, false);
  if (header.is_discarded()) throw FormatError("trajectory: malformed header JSON");

  ExpertTrajectory traj;
  std::size_t T = 0;
  try {
    if (header.at("version").get<int>() != 1) throw FormatError("trajectory: unsupported version");
    traj.spec = spec_from_json(header.at("spec"));
    traj.dataset_id = header.at("dataset_id").get<std::string>();
    traj.seed = header.at("seed").get<uint64_t>();
    traj.epochs_per_checkpoint = header.at("epochs_per_checkpoint").get<std::size_t>();
    const json& tc = header.at("train_config");
    traj.train_config.step_size = tc.at("step_size").get<double>();
    traj.train_config.batch_size = tc.at("batch_size").get<std::size_t>();
    traj.train_config.epochs = tc.at("epochs").get<std::size_t>();
    traj.loss_initial = header.value("loss_initial", 0.0);
    traj.loss_final = header.value("loss_final", 0.0);
    T = header.at("T").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("trajectory: bad header field: ") + e.what());
  }

  const std::size_t pc = traj.spec.param_count();
  traj.checkpoints.reserve(T + 1);
  for (std::size_t i = 0; i <= T; ++i) {
    const uint64_t len = r.read_u64();
    if (len != pc) throw FormatError("trajectory: checkpoint length mismatch");
    ParamVector ckpt(pc);
    for (std::size_t k = 0; k < pc; ++k) ckpt[k] = r.read_f64();
    traj.checkpoints.push_back(std::move(ckpt));
  }
  if (!r.exhausted()) throw FormatError("trajectory: trailing bytes");
  traj.validate();
  return traj;
}

Segment sample_segment(const ExpertTrajectory& traj, std::size_t expert_span, std::size_t max_start,
                       Rng& rng) {
  traj.validate();
  if (expert_span < 1) throw ContractViolation("sample_segment: expert_span must be >= 1");
  if (max_start + expert_span > traj.horizon())
    throw ContractViolation("sample_segment: max_start + expert_span exceeds trajectory horizon");

  const std::size_t retries = 8 * (max_start + 1);
  for (std::size_t attempt = 0; attempt < retries; ++attempt) {
    const std::size_t t = static_cast<std::size_t>(rng.below(max_start + 1));
    const ParamVector& start = traj.checkpoints[t];
    const ParamVector& target = traj.checkpoints[t + expert_span];
    const double delta = kernels::sq_dist(start.data(), target.data(), start.size());
    if (delta > kSegmentDeltaMin) {
      Segment seg;
      seg.start_index = t;
      seg.expert_span = expert_span;
      seg.theta_start = start;
      seg.theta_target = target;
      seg.delta = delta;
      return seg;
    }
  }
  throw NumericError("sample_segment: degenerate trajectory (all candidate segments have delta <= " +
                     std::to_string(kSegmentDeltaMin) + ")");
}

}  // namespace satm
