#include "fedalign/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

namespace fedalign {

void SyntheticTask::validate() const {
  if (num_classes == 0 || input_dim == 0 || samples_per_class == 0) {
    throw std::invalid_argument("SyntheticTask: counts must be >= 1");
  }
  if (class_means.rows() != num_classes || class_means.cols() != input_dim) {
    throw std::invalid_argument("SyntheticTask: class_means shape mismatch");
  }
  if (!(noise_std >= 0.0)) throw std::invalid_argument("SyntheticTask: noise_std must be >= 0");
  for (std::size_t a = 0; a < num_classes; ++a) {
    for (std::size_t b = a + 1; b < num_classes; ++b) {
      const auto ra = class_means.row(a);
      const auto rb = class_means.row(b);
      if (std::equal(ra.begin(), ra.end(), rb.begin())) {
        throw std::invalid_argument("SyntheticTask: class means must be pairwise distinct");
      }
    }
  }
}

SyntheticTask make_task(std::size_t num_classes, std::size_t input_dim, double separation,
                        double noise_std, std::size_t samples_per_class, std::uint64_t seed) {
  SyntheticTask task;
  task.num_classes = num_classes;
  task.input_dim = input_dim;
  task.noise_std = noise_std;
  task.samples_per_class = samples_per_class;
  task.class_means = Matrix(num_classes, input_dim);
  auto rng = make_stream(seed, "task.means");
  std::normal_distribution<double> dist(0.0, separation / std::sqrt(static_cast<double>(input_dim)));
  for (auto& v : task.class_means.values()) v = dist(rng);
  task.validate();
  return task;
}

Batch generate(const SyntheticTask& task, std::uint64_t seed) {
  task.validate();
  auto rng = make_stream(seed, "data.samples");
  std::normal_distribution<double> noise(0.0, 1.0);
  Batch pool;
  const std::size_t n = task.num_classes * task.samples_per_class;
  pool.features = Matrix(n, task.input_dim);
  pool.labels.resize(n);
  std::size_t r = 0;
  for (std::size_t c = 0; c < task.num_classes; ++c) {
    const auto mean = task.class_means.row(c);
    for (std::size_t i = 0; i < task.samples_per_class; ++i, ++r) {
      pool.labels[r] = c;
      auto row = pool.features.row(r);
      for (std::size_t d = 0; d < task.input_dim; ++d) {
        row[d] = mean[d] + task.noise_std * noise(rng);
      }
    }
  }
  return pool;
}

std::vector<std::size_t> ClientDataset::label_counts(std::size_t num_classes) const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (auto l : data.labels) {
    if (l < num_classes) ++counts[l];
  }
  return counts;
}

Vector sample_dirichlet(std::size_t n, double concentration, Rng& rng) {
  if (!(concentration > 0.0)) throw std::invalid_argument("Dirichlet concentration must be > 0");
  std::gamma_distribution<double> gamma(concentration, 1.0);
  Vector draw(n);
  double total = 0.0;
  for (auto& v : draw) {
    v = gamma(rng);
    total += v;
  }
  if (total <= 0.0) {
    // Every gamma draw underflowed (tiny concentration): put all mass on one coordinate.
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::fill(draw.begin(), draw.end(), 0.0);
    draw[pick(rng)] = 1.0;
    return draw;
  }
  for (auto& v : draw) v /= total;
  return draw;
}

namespace {

std::vector<std::vector<std::size_t>> split_once(const Batch& pool, std::size_t num_clients,
                                                 double concentration, Rng& rng) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool.labels[i]].push_back(i);

  std::vector<std::vector<std::size_t>> assignment(num_clients);
  for (auto& [label, indices] : by_class) {
    std::shuffle(indices.begin(), indices.end(), rng);
    const Vector q = sample_dirichlet(num_clients, concentration, rng);
    const std::size_t n = indices.size();
    double cumulative = 0.0;
    std::size_t start = 0;
    for (std::size_t c = 0; c < num_clients; ++c) {
      cumulative += q[c];
      std::size_t end = c + 1 == num_clients
                            ? n
                            : std::min(n, static_cast<std::size_t>(std::llround(cumulative * n)));
      end = std::max(end, start);
      assignment[c].insert(assignment[c].end(), indices.begin() + static_cast<std::ptrdiff_t>(start),
                           indices.begin() + static_cast<std::ptrdiff_t>(end));
      start = end;
    }
  }
  return assignment;
}

}  // namespace

std::vector<ClientDataset> dirichlet_partition(const Batch& pool, std::size_t num_clients,
                                               double concentration, std::uint64_t seed,
                                               std::size_t max_retries) {
  if (num_clients == 0) throw std::invalid_argument("dirichlet_partition: need >= 1 client");
  if (!(concentration > 0.0)) {
    throw std::invalid_argument("dirichlet_partition: concentration must be > 0");
  }
  auto rng = make_stream(seed, "data.partition");
  for (std::size_t attempt = 0; attempt <= max_retries; ++attempt) {
    auto assignment = split_once(pool, num_clients, concentration, rng);
    const bool any_empty = std::any_of(assignment.begin(), assignment.end(),
                                       [](const auto& a) { return a.empty(); });
    if (any_empty) continue;
    std::vector<ClientDataset> clients(num_clients);
    for (std::size_t c = 0; c < num_clients; ++c) {
      auto& idx = assignment[c];
      std::sort(idx.begin(), idx.end());
      auto& ds = clients[c];
      ds.client_id = c;
      ds.pool_indices = idx;
      ds.data.features = Matrix(idx.size(), pool.features.cols());
      ds.data.labels.resize(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const auto src = pool.features.row(idx[r]);
        std::copy(src.begin(), src.end(), ds.data.features.row(r).begin());
        ds.data.labels[r] = pool.labels[idx[r]];
      }
    }
    return clients;
  }
  throw std::runtime_error("dirichlet_partition: a client stayed empty after " +
                           std::to_string(max_retries) + " redraws (pool of " +
                           std::to_string(pool.size()) + " samples, " +
                           std::to_string(num_clients) + " clients)");
}

void write_clients_csv(const std::vector<ClientDataset>& clients,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  const std::size_t dim = clients.empty() ? 0 : clients.front().data.features.cols();
  out << "client_id,label";
  for (std::size_t d = 0; d < dim; ++d) out << ",f" << d;
  out << '\n';
  out << std::setprecision(17);
  for (const auto& c : clients) {
    for (std::size_t r = 0; r < c.size(); ++r) {
      out << c.client_id << ',' << c.data.labels[r];
      for (double v : c.data.features.row(r)) out << ',' << v;
      out << '\n';
    }
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<ClientDataset> read_clients_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("client_id,label", 0) != 0) {
    throw std::runtime_error("dataset CSV missing header: " + path.string());
  }
  const auto dim = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 1;
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<std::size_t>>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != dim + 2) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": expected " + std::to_string(dim + 2) + " columns");
    }
    auto& [feat, labels] = rows[std::stoul(cells[0])];
    labels.push_back(std::stoul(cells[1]));
    for (std::size_t d = 0; d < dim; ++d) feat.push_back(std::stod(cells[d + 2]));
  }
  std::vector<ClientDataset> clients;
  for (auto& [id, data] : rows) {
    ClientDataset ds;
    ds.client_id = id;
    ds.data.labels = std::move(data.second);
    ds.data.features = Matrix(ds.data.labels.size(), dim, std::move(data.first));
    clients.push_back(std::move(ds));
  }
  return clients;
}

}  // namespace fedalign
