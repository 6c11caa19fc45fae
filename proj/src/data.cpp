#include "satm/data.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "satm/errors.hpp"
#include "satm/io.hpp"
#include "satm/rng.hpp"

namespace satm {

using nlohmann::json;

void RealDataset::validate() const {
  if (class_count < 1) throw ContractViolation("RealDataset: class_count must be >= 1");
  if (labels.size() != features.rows) throw ContractViolation("RealDataset: label/feature row mismatch");
  std::vector<std::size_t> counts(class_count, 0);
  for (int32_t y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= class_count)
      throw ContractViolation("RealDataset: label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t c = 0; c < class_count; ++c)
    if (counts[c] == 0) throw ContractViolation("RealDataset: class " + std::to_string(c) + " is empty");
  for (double v : features.data)
    if (!std::isfinite(v)) throw NumericError("RealDataset: non-finite feature");
}

std::vector<std::size_t> RealDataset::class_indices(int32_t cls) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == cls) idx.push_back(i);
  return idx;
}

void SyntheticDataset::validate() const {
  if (class_count < 1 || ipc < 1) throw ContractViolation("SyntheticDataset: need class_count, ipc >= 1");
  if (images.rows != class_count * ipc) throw ContractViolation("SyntheticDataset: row count mismatch");
  if (labels.size() != images.rows) throw ContractViolation("SyntheticDataset: label count mismatch");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != static_cast<int32_t>(i / ipc))
      throw ContractViolation("SyntheticDataset: labels must be class-major blocks");
  if (!(inner_lr > 0.0)) throw ContractViolation("SyntheticDataset: inner_lr must be positive");
  for (double v : images.data)
    if (!std::isfinite(v)) throw NumericError("SyntheticDataset: non-finite image value");
}

namespace {

// Vertices of a regular (C-1)-simplex centered at the origin with edge
// length `separation`, embedded in the first C-1 coordinates. Built from the
// classic {e_1..e_{C-1}, (1+sqrt(C))/(C-1) * 1} construction. For C=2 this
// reduces to +/- separation/2 along the first axis.
Matrix simplex_means(std::size_t C, std::size_t d, double separation) {
  const std::size_t n = C - 1;
  Matrix m(C, d, 0.0);
  if (n == 0 || separation == 0.0) return m;
  std::vector<double> centroid(n, 0.0);
  const double last = (1.0 + std::sqrt(static_cast<double>(C))) / static_cast<double>(n);
  for (std::size_t j = 0; j < n; ++j) centroid[j] = (1.0 + last) / static_cast<double>(C);
  const double scale = separation / std::sqrt(2.0);
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t j = 0; j < n; ++j)
      m(c, j) = scale * ((c == j ? 1.0 : 0.0) - centroid[j]);
  for (std::size_t j = 0; j < n; ++j) m(C - 1, j) = scale * (last - centroid[j]);
  return m;
}

}  // namespace

RealDataset make_gaussian_mixture(std::size_t classes, std::size_t d, double mean_separation,
                                  std::size_t n_per_class, uint64_t seed, const std::string& split) {
  if (classes < 2 || d < 2) throw ContractViolation("make_gaussian_mixture: need classes >= 2, d >= 2");
  if (classes - 1 > d) throw ContractViolation("make_gaussian_mixture: need classes - 1 <= d");
  if (n_per_class < 1) throw ContractViolation("make_gaussian_mixture: need n_per_class >= 1");

  const Matrix means = simplex_means(classes, d, mean_separation);
  Rng rng(derive_seed(seed, "gaussian-mixture-" + split));

  RealDataset ds;
  ds.class_count = classes;
  ds.split = split;
  ds.features = Matrix(classes * n_per_class, d);
  ds.labels.resize(classes * n_per_class);
  std::size_t row = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t k = 0; k < n_per_class; ++k, ++row) {
      double* x = ds.features.row(row);
      for (std::size_t j = 0; j < d; ++j) x[j] = means(c, j) + rng.normal();
      ds.labels[row] = static_cast<int32_t>(c);
    }
  }
  std::ostringstream id;
  id << "gm-C" << classes << "-d" << d << "-sep" << mean_separation << "-n" << n_per_class
     << "-seed" << seed << "-" << split;
  ds.id = id.str();
  ds.validate();
  return ds;
}

namespace {

uint32_t read_be32(io::ByteReader& r) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v = (v << 8) | static_cast<unsigned char>(r.read_bytes(1)[0]);
  return v;
}

}  // namespace

RealDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                     std::optional<std::size_t> limit_per_class,
                     std::optional<std::size_t> downscale_to) {
  const std::string img_bytes = io::read_file(images_path);
  const std::string lbl_bytes = io::read_file(labels_path);
  io::ByteReader ir(img_bytes), lr(lbl_bytes);

  try {
    if (read_be32(ir) != 0x00000803u) throw FormatError("IDX images: bad magic (want 0x00000803)");
    if (read_be32(lr) != 0x00000801u) throw FormatError("IDX labels: bad magic (want 0x00000801)");
    const uint32_t n_img = read_be32(ir);
    const uint32_t rows = read_be32(ir);
    const uint32_t cols = read_be32(ir);
    const uint32_t n_lbl = read_be32(lr);
    if (n_img != n_lbl) throw FormatError("IDX: image/label count mismatch");
    if (rows == 0 || cols == 0) throw FormatError("IDX: zero image dimensions");
    const std::string_view pixels = ir.read_bytes(static_cast<std::size_t>(n_img) * rows * cols);
    const std::string_view raw_labels = lr.read_bytes(n_img);

    std::size_t out_rows = rows, out_cols = cols;
    if (downscale_to) {
      if (*downscale_to < 1 || *downscale_to > rows || *downscale_to > cols)
        throw ContractViolation("load_idx: downscale side out of range");
      out_rows = out_cols = *downscale_to;
    }
    const std::size_t d = out_rows * out_cols;

    // Group sample indices class-major, keeping file order within a class.
    std::size_t max_label = 0;
    for (std::size_t i = 0; i < n_img; ++i)
      max_label = std::max<std::size_t>(max_label, static_cast<unsigned char>(raw_labels[i]));
    const std::size_t C = max_label + 1;
    std::vector<std::vector<std::size_t>> per_class(C);
    for (std::size_t i = 0; i < n_img; ++i) {
      auto& bucket = per_class[static_cast<unsigned char>(raw_labels[i])];
      if (!limit_per_class || bucket.size() < *limit_per_class) bucket.push_back(i);
    }
    std::size_t total = 0;
    for (const auto& b : per_class) total += b.size();

    RealDataset ds;
    ds.class_count = C;
    ds.split = "train";
    ds.features = Matrix(total, d);
    ds.labels.resize(total);
    std::size_t out = 0;
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t src : per_class[c]) {
        const unsigned char* px =
            reinterpret_cast<const unsigned char*>(pixels.data()) + src * rows * cols;
        double* dst = ds.features.row(out);
        if (!downscale_to) {
          for (std::size_t k = 0; k < d; ++k) dst[k] = px[k] / 255.0;
        } else {
          for (std::size_t br = 0; br < out_rows; ++br) {
            const std::size_t r0 = br * rows / out_rows, r1 = (br + 1) * rows / out_rows;
            for (std::size_t bc = 0; bc < out_cols; ++bc) {
              const std::size_t c0 = bc * cols / out_cols, c1 = (bc + 1) * cols / out_cols;
              double acc = 0.0;
              for (std::size_t rr = r0; rr < r1; ++rr)
                for (std::size_t cc = c0; cc < c1; ++cc) acc += px[rr * cols + cc];
              dst[br * out_cols + bc] = acc / (255.0 * static_cast<double>((r1 - r0) * (c1 - c0)));
            }
          }
        }
        ds.labels[out] = static_cast<int32_t>(c);
        ++out;
      }
    }
    std::ostringstream id;
    id << "idx-" << images_path.filename().string() << "-C" << C << "-d" << d;
    if (limit_per_class) id << "-lpc" << *limit_per_class;
    ds.id = id.str();
    ds.validate();
    return ds;
  } catch (const FormatError&) {
    throw;
  } catch (const ContractViolation&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("IDX parse failure: ") + e.what());
  }
}

ZcaTransform fit_zca(const RealDataset& dataset, double eps) {
  if (eps < 0.0) throw ContractViolation("fit_zca: eps must be >= 0");
  const std::size_t n = dataset.size(), d = dataset.dim();
  if (n < 2) throw ContractViolation("fit_zca: need at least 2 samples");

  ZcaTransform t;
  t.eps = eps;
  t.underdetermined = n <= d;
  t.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = dataset.features.row(i);
    for (std::size_t j = 0; j < d; ++j) t.mean[j] += x[j];
  }
  for (std::size_t j = 0; j < d; ++j) t.mean[j] /= static_cast<double>(n);

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  std::vector<double> xc(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = dataset.features.row(i);
    for (std::size_t j = 0; j < d; ++j) xc[j] = x[j] - t.mean[j];
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += xc[a] * xc[b];
  }
  cov /= static_cast<double>(n - 1);
  cov = cov.selfadjointView<Eigen::Upper>();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("fit_zca: eigendecomposition failed");
  Eigen::VectorXd vals = es.eigenvalues();
  for (Eigen::Index i = 0; i < vals.size(); ++i)
    if (!std::isfinite(vals(i))) throw NumericError("fit_zca: non-finite eigenvalue");

  Eigen::VectorXd inv_sqrt = (vals.array() + eps).cwiseMax(0.0).rsqrt();
  for (Eigen::Index i = 0; i < vals.size(); ++i)
    if (!std::isfinite(inv_sqrt(i))) throw NumericError("fit_zca: singular covariance with eps = 0");
  Eigen::MatrixXd w = es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();

  t.eigenvalues.assign(vals.data(), vals.data() + vals.size());
  t.whitening = Matrix(d, d);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) t.whitening(a, b) = w(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
  return t;
}

namespace {

Matrix affine_map(const ZcaTransform& t, const Matrix& features, bool inverse) {
  const std::size_t d = t.mean.size();
  if (features.cols != d) throw ContractViolation("zca: feature dim mismatch");
  const std::size_t n = features.rows;
  Matrix out(n, d);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(
      t.whitening.data.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  Eigen::MatrixXd M;
  if (inverse)
    M = W.inverse();
  else
    M = W;
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = features.row(i);
    double* y = out.row(i);
    if (inverse) {
      for (std::size_t a = 0; a < d; ++a) {
        double acc = 0.0;
        for (std::size_t b = 0; b < d; ++b) acc += M(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) * x[b];
        y[a] = acc + t.mean[a];
      }
    } else {
      for (std::size_t a = 0; a < d; ++a) {
        double acc = 0.0;
        for (std::size_t b = 0; b < d; ++b) acc += M(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) * (x[b] - t.mean[b]);
        y[a] = acc;
      }
    }
  }
  return out;
}

}  // namespace

Matrix apply_zca(const ZcaTransform& t, const Matrix& features) { return affine_map(t, features, false); }

Matrix unapply_zca(const ZcaTransform& t, const Matrix& features) { return affine_map(t, features, true); }

// ---- file formats ----

namespace {

constexpr std::string_view kRealMagic = "SATMRD01";
constexpr std::string_view kSynthMagic = "SATMDS01";

void put_header(std::string& out, std::string_view magic, const json& header) {
  out.append(magic);
  const std::string h = header.dump();
  io::put_u64(out, h.size());
  out.append(h);
}

json take_header(io::ByteReader& r, std::string_view magic, const char* what) {
  std::string_view got = r.read_bytes(magic.size());
  if (got != magic) throw FormatError(std::string(what) + ": bad magic");
  const uint64_t len = r.read_u64();
  if (len > r.remaining()) throw FormatError(std::string(what) + ": truncated header");
  json h = json::parse(r.read_bytes(len), nullptr, false);
  if (h.is_discarded()) throw FormatError(std::string(what) + ": malformed header JSON");
  if (!h.contains("version") || !h["version"].is_number_integer() || h["version"].get<int>() != 1)
    throw FormatError(std::string(what) + ": unsupported version");
  return h;
}

}  // namespace

void save_real(const RealDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  json header{{"version", 1},
              {"id", ds.id},
              {"classes", ds.class_count},
              {"d", ds.dim()},
              {"n", ds.size()},
              {"split", ds.split}};
  std::string out;
  put_header(out, kRealMagic, header);
  io::put_u64(out, ds.features.data.size());
  for (double v : ds.features.data) io::put_f64(out, v);
  io::put_u64(out, ds.labels.size());
  for (int32_t v : ds.labels) io::put_i32(out, v);
  io::write_file(path, out);
}

RealDataset load_real(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  io::ByteReader r(bytes);
  const json h = take_header(r, kRealMagic, "real dataset");
  RealDataset ds;
  try {
    ds.id = h.at("id").get<std::string>();
    ds.class_count = h.at("classes").get<std::size_t>();
    ds.split = h.at("split").get<std::string>();
    const auto n = h.at("n").get<std::size_t>();
    const auto d = h.at("d").get<std::size_t>();
    const uint64_t fcount = r.read_u64();
    if (fcount != n * d) throw FormatError("real dataset: feature block size mismatch");
    ds.features = Matrix(n, d);
    for (std::size_t i = 0; i < fcount; ++i) ds.features.data[i] = r.read_f64();
    const uint64_t lcount = r.read_u64();
    if (lcount != n) throw FormatError("real dataset: label block size mismatch");
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = r.read_i32();
  } catch (const json::exception& e) {
    throw FormatError(std::string("real dataset: bad header field: ") + e.what());
  }
  ds.validate();
  return ds;
}

void save_synthetic(const SyntheticDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  json header{{"version", 1},
              {"ipc", ds.ipc},
              {"classes", ds.class_count},
              {"d", ds.dim()},
              {"alpha", ds.inner_lr},
              {"provenance", ds.provenance}};
  std::string out;
  put_header(out, kSynthMagic, header);
  for (std::size_t c = 0; c < ds.class_count; ++c) {
    io::put_u64(out, ds.ipc * ds.dim());
    for (std::size_t k = 0; k < ds.ipc; ++k) {
      const double* row = ds.images.row(c * ds.ipc + k);
      for (std::size_t j = 0; j < ds.dim(); ++j) io::put_f64(out, row[j]);
    }
  }
  io::write_file(path, out);
}

SyntheticDataset load_synthetic(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  io::ByteReader r(bytes);
  const json h = take_header(r, kSynthMagic, "synthetic dataset");
  SyntheticDataset ds;
  try {
    ds.ipc = h.at("ipc").get<std::size_t>();
    ds.class_count = h.at("classes").get<std::size_t>();
    ds.inner_lr = h.at("alpha").get<double>();
    ds.provenance = h.at("provenance").get<std::string>();
    const auto d = h.at("d").get<std::size_t>();
    ds.images = Matrix(ds.class_count * ds.ipc, d);
    ds.labels.resize(ds.class_count * ds.ipc);
    for (std::size_t c = 0; c < ds.class_count; ++c) {
      const uint64_t count = r.read_u64();
      if (count != ds.ipc * d) throw FormatError("synthetic dataset: class block size mismatch");
      for (std::size_t k = 0; k < ds.ipc; ++k) {
        double* row = ds.images.row(c * ds.ipc + k);
        for (std::size_t j = 0; j < d; ++j) row[j] = r.read_f64();
        ds.labels[c * ds.ipc + k] = static_cast<int32_t>(c);
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("synthetic dataset: bad header field: ") + e.what());
  }
  ds.validate();
  return ds;
}

}  // namespace satm
