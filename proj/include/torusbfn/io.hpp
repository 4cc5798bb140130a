#pragma once

// CSV and JSON files of a run directory.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "torusbfn/error.hpp"
#include "torusbfn/state.hpp"
#include "torusbfn/training.hpp"

namespace torusbfn {

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  auto out = open_for_write(path);
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DomainError(path.string() + ": " + e.what());
  }
}

/// Header: atom_0..atom_{N-1}, frac_0..frac_{D-1}, lattice_0..lattice_{L-1}.
inline void write_samples_csv(const std::filesystem::path& path, const std::vector<ToyCrystal>& samples) {
  auto out = open_for_write(path);
  if (samples.empty()) return;
  const auto& first = samples.front();
  std::vector<std::string> cols;
  for (std::size_t k = 0; k < first.atoms.size(); ++k) cols.push_back("atom_" + std::to_string(k));
  for (std::size_t k = 0; k < first.coords.size(); ++k) cols.push_back("frac_" + std::to_string(k));
  for (Eigen::Index k = 0; k < first.lattice.size(); ++k) cols.push_back("lattice_" + std::to_string(k));
  for (std::size_t k = 0; k < cols.size(); ++k) out << (k ? "," : "") << cols[k];
  out << '\n';
  for (const auto& x : samples) {
    bool sep = false;
    auto put = [&](auto v) {
      out << (sep ? "," : "") << v;
      sep = true;
    };
    for (const auto& a : x.atoms) put(a.index);
    for (const auto& c : x.coords) put(angle_to_frac(c));
    for (Eigen::Index k = 0; k < x.lattice.size(); ++k) put(x.lattice[k]);
    out << '\n';
  }
}

inline std::vector<ToyCrystal> read_samples_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) return {};
  std::size_t atoms = 0, coords = 0, lattice = 0;
  {
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) {
      if (col.rfind("atom_", 0) == 0) {
        ++atoms;
      } else if (col.rfind("frac_", 0) == 0) {
        ++coords;
      } else if (col.rfind("lattice_", 0) == 0) {
        ++lattice;
      } else {
        throw DomainError("samples csv: unexpected column '" + col + "'");
      }
    }
  }
  std::vector<ToyCrystal> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) {
      try {
        v.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DomainError("samples csv: bad number at row " + std::to_string(row));
      }
    }
    if (v.size() != atoms + coords + lattice) throw DomainError("samples csv: wrong column count at row " + std::to_string(row));
    ToyCrystal x;
    for (std::size_t k = 0; k < atoms; ++k) x.atoms.push_back(OneHot{static_cast<int>(v[k])});
    for (std::size_t k = 0; k < coords; ++k) x.coords.push_back(frac_to_angle(v[atoms + k]));
    x.lattice.resize(static_cast<Eigen::Index>(lattice));
    for (std::size_t k = 0; k < lattice; ++k) x.lattice[static_cast<Eigen::Index>(k)] = v[atoms + coords + k];
    out.push_back(std::move(x));
  }
  return out;
}

/// Columns: iteration, lr, atoms, torus, lattice, total, validation (empty when not evaluated).
inline void write_loss_curve_csv(const std::filesystem::path& path, const std::vector<LossRecord>& curve) {
  auto out = open_for_write(path);
  out << "iteration,lr,atoms,torus,lattice,total,validation\n";
  for (const auto& r : curve) {
    out << r.iteration << ',' << r.lr << ',' << r.train.atoms << ',' << r.train.torus << ',' << r.train.lattice << ','
        << r.train.total << ',';
    if (r.validation) out << *r.validation;
    out << '\n';
  }
}

}  // namespace torusbfn
