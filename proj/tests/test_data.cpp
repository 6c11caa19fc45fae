#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "satm/data.hpp"
#include "satm/errors.hpp"
#include "satm/evalharness.hpp"
#include "satm/io.hpp"
#include "satm/kernels.hpp"
#include "satm/trajectory.hpp"
#include "support/oracles.hpp"

using namespace satm;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
  const fs::path p = fs::temp_directory_path() / "satm_test_data";
  fs::create_directories(p);
  return p;
}

void put_be32(std::string& out, uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

// Minimal IDX pair: n square images with the given side, one label byte each.
std::pair<fs::path, fs::path> write_idx(const std::string& tag, std::size_t n, std::size_t side,
                                        const std::vector<unsigned char>& pixels,
                                        const std::vector<unsigned char>& labels,
                                        uint32_t image_magic = 0x00000803u) {
  std::string img;
  put_be32(img, image_magic);
  put_be32(img, static_cast<uint32_t>(n));
  put_be32(img, static_cast<uint32_t>(side));
  put_be32(img, static_cast<uint32_t>(side));
  img.append(pixels.begin(), pixels.end());
  std::string lbl;
  put_be32(lbl, 0x00000801u);
  put_be32(lbl, static_cast<uint32_t>(n));
  lbl.append(labels.begin(), labels.end());
  const fs::path pi = tmp_dir() / (tag + "-images.idx");
  const fs::path pl = tmp_dir() / (tag + "-labels.idx");
  io::write_file(pi, img);
  io::write_file(pl, lbl);
  return {pi, pl};
}

}  // namespace

TEST_CASE("gaussian mixture is deterministic, splits are disjoint streams") {
  const RealDataset a = make_gaussian_mixture(4, 10, 4.0, 50, 3, "train");
  const RealDataset b = make_gaussian_mixture(4, 10, 4.0, 50, 3, "train");
  CHECK(a.features.data == b.features.data);
  CHECK(a.labels == b.labels);
  const RealDataset t = make_gaussian_mixture(4, 10, 4.0, 50, 3, "test");
  CHECK(a.features.data != t.features.data);
  CHECK(a.id != t.id);
}

TEST_CASE("two-class means sit at +-(separation/2, 0, ...)") {
  const RealDataset ds = make_gaussian_mixture(2, 2, 4.0, 4000, 11, "train");
  double m0[2] = {0, 0}, m1[2] = {0, 0};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double* m = ds.labels[i] == 0 ? m0 : m1;
    m[0] += ds.features(i, 0);
    m[1] += ds.features(i, 1);
  }
  for (auto* m : {m0, m1})
    for (int j = 0; j < 2; ++j) m[j] /= 4000.0;
  CHECK(std::abs(std::abs(m0[0]) - 2.0) < 0.1);
  CHECK(std::abs(m0[1]) < 0.1);
  CHECK(std::abs(m0[0] + m1[0]) < 0.1);  // antipodal
}

TEST_CASE("class means are pairwise equidistant at the requested separation") {
  const RealDataset ds = make_gaussian_mixture(5, 8, 3.0, 2000, 13, "train");
  Matrix means(5, 8, 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto c = static_cast<std::size_t>(ds.labels[i]);
    for (std::size_t j = 0; j < 8; ++j) means(c, j) += ds.features(i, j);
  }
  for (auto& v : means.data) v /= 2000.0;
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = a + 1; b < 5; ++b) {
      const double dist = std::sqrt(kernels::sq_dist(means.row(a), means.row(b), 8));
      CHECK(dist == doctest::Approx(3.0).epsilon(0.05));
    }
}

TEST_CASE("zero separation is chance level for a trained classifier") {
  const RealDataset train = make_gaussian_mixture(4, 6, 0.0, 300, 5, "train");
  const RealDataset test = make_gaussian_mixture(4, 6, 0.0, 300, 5, "test");
  const ExpertTrajectory traj = train_expert(ModelSpec::softmax(6, 4), train, 6, 0.1, 32, 1);
  const double acc = accuracy(traj.spec, traj.checkpoints.back(), test.features, test.labels);
  CHECK(std::abs(acc - 0.25) <= 0.1);
}

TEST_CASE("separation 6 is nearly separable under the nearest-mean oracle") {
  const RealDataset train = make_gaussian_mixture(4, 10, 6.0, 200, 21, "train");
  const RealDataset test = make_gaussian_mixture(4, 10, 6.0, 200, 21, "test");
  CHECK(oracles::nearest_mean_accuracy(train, test) > 0.99);
}

TEST_CASE("mixture rejects invalid shapes") {
  CHECK_THROWS_AS(make_gaussian_mixture(1, 4, 1.0, 10, 0, "train"), ContractViolation);
  CHECK_THROWS_AS(make_gaussian_mixture(4, 1, 1.0, 10, 0, "train"), ContractViolation);
  CHECK_THROWS_AS(make_gaussian_mixture(6, 4, 1.0, 10, 0, "train"), ContractViolation);  // C-1 > d
}

TEST_CASE("idx loader validates magic and counts") {
  std::vector<unsigned char> px(2 * 4 * 4, 128), lb{0, 1};
  auto [pi, pl] = write_idx("ok", 2, 4, px, lb);
  const RealDataset ds = load_idx(pi, pl);
  CHECK(ds.size() == 2);
  CHECK(ds.dim() == 16);
  CHECK(ds.features(0, 0) == doctest::Approx(128.0 / 255.0));

  auto [bi, bl] = write_idx("badmagic", 2, 4, px, lb, 0x00000802u);
  CHECK_THROWS_AS(load_idx(bi, bl), FormatError);
  CHECK_THROWS_AS(load_idx(tmp_dir() / "missing.idx", pl), IoError);
}

TEST_CASE("idx block-mean downscale 28 -> 7 averages 4x4 blocks exactly") {
  std::vector<unsigned char> px(28 * 28);
  for (std::size_t r = 0; r < 28; ++r)
    for (std::size_t c = 0; c < 28; ++c) px[r * 28 + c] = static_cast<unsigned char>(r + c);
  auto [pi, pl] = write_idx("down7", 1, 28, px, {0});
  const RealDataset ds = load_idx(pi, pl, std::nullopt, 7);
  CHECK(ds.dim() == 49);
  for (std::size_t br = 0; br < 7; ++br)
    for (std::size_t bc = 0; bc < 7; ++bc) {
      double want = 0.0;
      for (std::size_t r = br * 4; r < br * 4 + 4; ++r)
        for (std::size_t c = bc * 4; c < bc * 4 + 4; ++c) want += px[r * 28 + c];
      want /= 16.0 * 255.0;
      CHECK(ds.features(0, br * 7 + bc) == doctest::Approx(want).epsilon(1e-14));
    }
}

TEST_CASE("idx downscale 28 -> 8 uses floor-boundary blocks, d = 64") {
  std::vector<unsigned char> px(28 * 28, 77);
  auto [pi, pl] = write_idx("down8", 1, 28, px, {0});
  const RealDataset ds = load_idx(pi, pl, std::nullopt, 8);
  CHECK(ds.dim() == 64);
  for (std::size_t j = 0; j < 64; ++j)
    CHECK(ds.features(0, j) == doctest::Approx(77.0 / 255.0).epsilon(1e-14));
}

TEST_CASE("idx limit_per_class keeps exactly limit*C samples class-major") {
  std::vector<unsigned char> px(8 * 2 * 2, 10);
  std::vector<unsigned char> lb{1, 0, 1, 0, 1, 0, 0, 1};
  auto [pi, pl] = write_idx("limit", 8, 2, px, lb);
  const RealDataset ds = load_idx(pi, pl, 2);
  CHECK(ds.size() == 4);
  CHECK(ds.labels == std::vector<int32_t>{0, 0, 1, 1});
}

TEST_CASE("zca on already-white data is close to identity") {
  RealDataset ds;
  ds.class_count = 1;
  ds.split = "train";
  ds.id = "white";
  ds.features = Matrix(10000, 4);
  Rng rng(31);
  for (auto& v : ds.features.data) v = rng.normal();
  ds.labels.assign(10000, 0);
  const ZcaTransform t = fit_zca(ds, 0.0);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b)
      CHECK(std::abs(t.whitening(a, b) - (a == b ? 1.0 : 0.0)) < 0.1);
}

TEST_CASE("very large eps shrinks W to eps^{-1/2} I") {
  RealDataset ds;
  ds.class_count = 1;
  ds.split = "train";
  ds.id = "shrink";
  ds.features = Matrix(500, 3);
  Rng rng(32);
  for (auto& v : ds.features.data) v = rng.uniform(-2.0, 2.0);
  ds.labels.assign(500, 0);
  const double eps = 1e12;
  const ZcaTransform t = fit_zca(ds, eps);
  const double want = 1.0 / std::sqrt(eps);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      CHECK(std::abs(t.whitening(a, b) - (a == b ? want : 0.0)) < 1e-8);
}

namespace {

// Correlated draws with eigenvalues of the population covariance >= 2.
RealDataset correlated_dataset(std::size_t n, Rng& rng) {
  const std::size_t d = 6;
  RealDataset ds;
  ds.class_count = 1;
  ds.split = "train";
  ds.id = "corr";
  ds.features = Matrix(n, d);
  ds.labels.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double z[6];
    for (auto& v : z) v = rng.normal();
    double* x = ds.features.row(i);
    // lower-triangular mix with diagonal >= sqrt(2)
    x[0] = 1.5 * z[0];
    x[1] = 0.4 * z[0] + 1.6 * z[1];
    x[2] = 0.3 * z[1] + 1.7 * z[2];
    x[3] = 0.5 * z[0] + 1.8 * z[3];
    x[4] = 0.2 * z[2] + 1.9 * z[4];
    x[5] = 0.6 * z[3] + 2.0 * z[5];
  }
  return ds;
}

}  // namespace

TEST_CASE("whitened train covariance is identity-like with the eps correction") {
  Rng rng(33);
  const RealDataset ds = correlated_dataset(4000, rng);
  const double eps = 1e-6;
  const ZcaTransform t = fit_zca(ds, eps);

  // symmetry and positive definiteness of W
  for (std::size_t a = 0; a < 6; ++a)
    for (std::size_t b = 0; b < 6; ++b)
      CHECK(std::abs(t.whitening(a, b) - t.whitening(b, a)) < 1e-10);
  for (double lam : t.eigenvalues) CHECK(lam > 1.0);
  Rng probe(35);
  for (int trial = 0; trial < 20; ++trial) {
    double x[6], quad = 0.0;
    for (auto& v : x) v = probe.uniform(-1.0, 1.0);
    for (std::size_t a = 0; a < 6; ++a)
      for (std::size_t b = 0; b < 6; ++b) quad += x[a] * t.whitening(a, b) * x[b];
    CHECK(quad > 0.0);
  }

  // brute-force covariance of the whitened features
  const Matrix w = apply_zca(t, ds.features);
  const std::size_t n = w.rows, d = w.cols;
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += w(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  Matrix cov(d, d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov(a, b) += (w(i, a) - mean[a]) * (w(i, b) - mean[b]);
  for (auto& v : cov.data) v /= static_cast<double>(n - 1);

  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) {
      if (a == b) {
        bool close_to_some = false;
        for (double lam : t.eigenvalues)
          if (std::abs(cov(a, a) - lam / (lam + eps)) < 1e-6) close_to_some = true;
        CHECK(close_to_some);
      } else {
        CHECK(std::abs(cov(a, b)) < 1e-6);
      }
    }
}

TEST_CASE("zca round trip is an identity when eps = 0") {
  Rng rng(34);
  const RealDataset ds = correlated_dataset(1000, rng);
  const ZcaTransform t = fit_zca(ds, 0.0);
  const Matrix back = unapply_zca(t, apply_zca(t, ds.features));
  for (std::size_t i = 0; i < ds.features.size(); ++i)
    CHECK(std::abs(back.data[i] - ds.features.data[i]) < 1e-8);
}

TEST_CASE("real and synthetic dataset files round-trip bit-exactly") {
  const RealDataset real = make_gaussian_mixture(3, 5, 2.0, 20, 7, "train");
  const fs::path rp = tmp_dir() / "real.satmrd";
  save_real(real, rp);
  const RealDataset rl = load_real(rp);
  CHECK(rl.features.data == real.features.data);
  CHECK(rl.labels == real.labels);
  CHECK(rl.id == real.id);
  CHECK(rl.split == real.split);

  SyntheticDataset synth;
  synth.class_count = 3;
  synth.ipc = 2;
  synth.inner_lr = 0.034;
  synth.provenance = "abc123";
  synth.images = Matrix(6, 5);
  Rng rng(8);
  for (auto& v : synth.images.data) v = rng.normal();
  synth.labels = {0, 0, 1, 1, 2, 2};
  const fs::path sp = tmp_dir() / "synth.satmds";
  save_synthetic(synth, sp);
  const SyntheticDataset sl = load_synthetic(sp);
  CHECK(sl.images.data == synth.images.data);
  CHECK(sl.inner_lr == synth.inner_lr);
  CHECK(sl.provenance == synth.provenance);
  CHECK(sl.labels == synth.labels);

  // byte-level determinism of the writer
  save_real(real, tmp_dir() / "real2.satmrd");
  CHECK(io::hash_file(rp) == io::hash_file(tmp_dir() / "real2.satmrd"));
}

TEST_CASE("corrupted headers give structured format errors") {
  const RealDataset real = make_gaussian_mixture(3, 5, 2.0, 10, 7, "train");
  const fs::path rp = tmp_dir() / "corrupt.satmrd";
  save_real(real, rp);
  std::string bytes = io::read_file(rp);
  bytes[3] ^= 0x40;  // one magic byte
  io::write_file(rp, bytes);
  CHECK_THROWS_AS(load_real(rp), FormatError);

  save_real(real, rp);
  bytes = io::read_file(rp);
  bytes[20] ^= 0x01;  // inside the JSON header
  io::write_file(rp, bytes);
  CHECK_THROWS_AS(load_real(rp), FormatError);

  // unsupported version
  std::string v999;
  v999.append("SATMRD01");
  const std::string hdr = R"({"version":999,"id":"x","classes":1,"d":1,"n":1,"split":"train"})";
  io::put_u64(v999, hdr.size());
  v999.append(hdr);
  io::write_file(rp, v999);
  CHECK_THROWS_WITH_AS(load_real(rp), doctest::Contains("unsupported version"), FormatError);
}
