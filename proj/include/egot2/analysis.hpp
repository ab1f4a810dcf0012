#pragma once

// Attention analysis: task-relation matrices, top-weighted segments, and report files.

#include <fstream>

#include "egot2/train_eval.hpp"

namespace egot2 {

struct TaskRelationMatrix {
  std::vector<std::string> rows;  // task of interest (primary or prompt)
  std::vector<std::string> cols;  // source ids
  Matrix<double> raw;             // dataset-averaged pooled attention mass
  Matrix<double> normalized;      // row-normalized
  std::string normalization = "row";

  double at(const std::string& row, const std::string& col) const {
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < cols.size(); ++c)
        if (rows[r] == row && cols[c] == col) return normalized(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    throw ValidationError("relation matrix has no cell (" + row + ", " + col + ")");
  }
};

// Sums head maps and the given query rows into one mass per key column.
template <class S>
std::vector<double> column_mass(const nn::HeadMaps<S>& heads, const std::vector<int>& rows) {
  if (heads.empty()) throw ValidationError("attention capture is empty");
  std::vector<double> mass(static_cast<std::size_t>(heads.front().cols()), 0.0);
  for (const auto& a : heads)
    for (int r : rows)
      for (Eigen::Index c = 0; c < a.cols(); ++c) mass[static_cast<std::size_t>(c)] += static_cast<double>(a(r, c));
  return mass;
}

// Pools per-column mass into one value per source.
inline std::vector<double> pool_by_source(const std::vector<double>& mass, const std::vector<TokenInfo>& meta, std::size_t n_sources) {
  if (mass.size() != meta.size()) throw ShapeError("pool_by_source: attention columns do not match token metadata");
  std::vector<double> out(n_sources, 0.0);
  for (std::size_t i = 0; i < mass.size(); ++i) out[static_cast<std::size_t>(meta[i].source)] += mass[i];
  return out;
}

inline void normalize_rows(TaskRelationMatrix& m) {
  m.normalized = m.raw;
  for (Eigen::Index r = 0; r < m.raw.rows(); ++r) {
    const double s = m.raw.row(r).sum();
    if (s > 0) m.normalized.row(r) /= s;
  }
}

// Per-clip pooled last-layer attention from the readout rows of a task-specific translator.
template <class S>
std::vector<double> egot2s_clip_mass(const Translator<S>& tr, const CachedClip<S>& clip, std::vector<double>* per_column = nullptr,
                                     std::vector<TokenInfo>* meta = nullptr) {
  if (!tr.spec().fusion.capture_attention) throw Incompatible("attention capture is disabled for this translator");
  if (tr.spec().fusion.depth < 1) throw Incompatible("translator has no encoder layer to analyze");
  ag::Tape<S> t;
  auto vars = clip_vars<S>(t, clip, nullptr);
  auto r = tr.forward(t, vars, clip_layouts(clip), true);
  const auto mass = column_mass(r.attention.back(), tr.head().readout_rows(r.tokens.meta));
  if (per_column) *per_column = mass;
  if (meta) *meta = r.tokens.meta;
  return pool_by_source(mass, r.tokens.meta, tr.spec().sources.size());
}

template <class S>
TaskRelationMatrix relation_matrix_s(const Translator<S>& tr, const std::vector<FrozenModel<S>>& backbones, const Dataset& val,
                                     const ModalityConfig& m, double stride_s) {
  if (!tr.spec().fusion.capture_attention) throw Incompatible("attention capture is disabled for this translator");
  std::vector<const FrozenModel<S>*> bbs;
  std::vector<int> ids;
  for (std::size_t i = 0; i < backbones.size(); ++i) {
    bbs.push_back(&backbones[i]);
    ids.push_back(static_cast<int>(i));
  }
  const auto clips = prepare_clips(val, tr.spec().primary, m, bbs, ids, stride_s, false);
  TaskRelationMatrix out;
  out.rows = {tr.spec().primary.task_id};
  for (const auto& s : tr.spec().sources) out.cols.push_back(s.source_id);
  out.raw = Matrix<double>::Zero(1, static_cast<Eigen::Index>(out.cols.size()));
  for (const auto& c : clips) {
    const auto pooled = egot2s_clip_mass(tr, c);
    for (std::size_t k = 0; k < pooled.size(); ++k) out.raw(0, static_cast<Eigen::Index>(k)) += pooled[k];
  }
  if (!clips.empty()) out.raw /= static_cast<double>(clips.size());
  normalize_rows(out);
  return out;
}

// Per-clip pooled last-layer cross-attention of the general translator over its own output sequence.
template <class S>
std::vector<double> egot2g_clip_mass(const GeneralTranslator<S>& g, const CachedClip<S>& clip, const std::string& task_id, bool temporal_pool) {
  if (!g.spec().fusion.capture_attention) throw Incompatible("attention capture is disabled for this translator");
  ag::Tape<S> t;
  const auto fwd = general_memory(t, g, clip, temporal_pool, false);
  const Matrix<S> mem = fwd.memory.z.value();
  const auto ids = g.generate_ids(mem, task_id);
  const auto cross = cross_attention_weights(g.decoder(), mem, ids, true);
  std::vector<int> rows(ids.size());
  std::iota(rows.begin(), rows.end(), 0);
  return pool_by_source(column_mass(cross.back(), rows), fwd.memory.meta, g.spec().sources.size());
}

template <class S>
TaskRelationMatrix relation_matrix_g(const GeneralTranslator<S>& g, const std::vector<FrozenModel<S>>& backbones,
                                     const std::vector<Dataset>& val, const ModalityConfig& m, double stride_s, bool temporal_pool) {
  if (!g.spec().fusion.capture_attention) throw Incompatible("attention capture is disabled for this translator");
  TaskRelationMatrix out;
  for (const auto& s : g.spec().sources) out.cols.push_back(s.source_id);
  out.raw = Matrix<double>::Zero(static_cast<Eigen::Index>(val.size()), static_cast<Eigen::Index>(out.cols.size()));
  for (std::size_t r = 0; r < val.size(); ++r) {
    const TaskSpec& task = g.task(val[r].task.task_id);
    out.rows.push_back(task.task_id);
    const auto clips = prepare_general_clips(val[r], task, m, backbones, stride_s, false);
    for (const auto& c : clips) {
      const auto pooled = egot2g_clip_mass(g, c, task.task_id, temporal_pool);
      for (std::size_t k = 0; k < pooled.size(); ++k) out.raw(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) += pooled[k];
    }
    if (!clips.empty()) out.raw.row(static_cast<Eigen::Index>(r)) /= static_cast<double>(clips.size());
  }
  normalize_rows(out);
  return out;
}

struct Segment {
  std::string clip_id;
  int window = 0;
  double weight = 0;
};

// Clips/windows ranked by the readout attention mass on `source_id`'s tokens.
template <class S>
std::vector<Segment> top_segments(const Translator<S>& tr, const std::vector<FrozenModel<S>>& backbones, const Dataset& val,
                                  const ModalityConfig& m, double stride_s, const std::string& source_id, std::size_t n) {
  if (!tr.spec().fusion.capture_attention) throw Incompatible("attention capture is disabled for this translator");
  const int src = tr.core().source_index(source_id);
  if (n == 0) return {};
  std::vector<const FrozenModel<S>*> bbs;
  std::vector<int> ids;
  for (std::size_t i = 0; i < backbones.size(); ++i) {
    bbs.push_back(&backbones[i]);
    ids.push_back(static_cast<int>(i));
  }
  std::vector<Segment> all;
  for (const auto& c : prepare_clips(val, tr.spec().primary, m, bbs, ids, stride_s, false)) {
    std::vector<double> mass;
    std::vector<TokenInfo> meta;
    egot2s_clip_mass(tr, c, &mass, &meta);
    std::map<int, double> per_window;
    for (std::size_t i = 0; i < meta.size(); ++i)
      if (meta[i].source == src) per_window[meta[i].window] += mass[i];
    for (const auto& [w, v] : per_window) all.push_back({c.clip_id, w, v});
  }
  std::stable_sort(all.begin(), all.end(), [](const Segment& a, const Segment& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    if (a.clip_id != b.clip_id) return a.clip_id < b.clip_id;
    return a.window < b.window;
  });
  if (all.size() > n) all.resize(n);
  return all;
}

// ---------------------------------------------------------------------------
// Report files

inline std::string relations_csv(const TaskRelationMatrix& m) {
  std::ostringstream os;
  os.precision(17);
  os << "task";
  for (const auto& c : m.cols) os << "," << c;
  os << "\n";
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    os << m.rows[r];
    for (Eigen::Index c = 0; c < m.normalized.cols(); ++c) os << "," << m.normalized(static_cast<Eigen::Index>(r), c);
    os << "\n";
  }
  return os.str();
}

inline TaskRelationMatrix parse_relations_csv(const std::string& text) {
  TaskRelationMatrix m;
  std::istringstream in(text);
  std::string line;
  auto cells = [](const std::string& l) {
    std::vector<std::string> out;
    std::stringstream ss(l);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  if (!std::getline(in, line)) throw FormatError("relations.csv: empty");
  auto head = cells(line);
  m.cols.assign(head.begin() + 1, head.end());
  std::vector<std::vector<double>> vals;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto c = cells(line);
    if (c.size() != head.size()) throw FormatError("relations.csv: ragged row");
    m.rows.push_back(c[0]);
    std::vector<double> row;
    for (std::size_t i = 1; i < c.size(); ++i) row.push_back(std::stod(c[i]));
    vals.push_back(row);
  }
  m.normalized.resize(static_cast<Eigen::Index>(vals.size()), static_cast<Eigen::Index>(m.cols.size()));
  for (std::size_t r = 0; r < vals.size(); ++r)
    for (std::size_t c = 0; c < vals[r].size(); ++c) m.normalized(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = vals[r][c];
  m.raw = m.normalized;
  return m;
}

inline json to_json(const TaskRelationMatrix& m) {
  auto rows_of = [](const Matrix<double>& x) {
    std::vector<std::vector<double>> out;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      std::vector<double> row;
      for (Eigen::Index c = 0; c < x.cols(); ++c) row.push_back(x(r, c));
      out.push_back(row);
    }
    return out;
  };
  return {{"rows", m.rows}, {"cols", m.cols}, {"raw", rows_of(m.raw)}, {"normalized", rows_of(m.normalized)}, {"normalization", m.normalization}};
}

// Binary PPM heatmap of the row-normalized matrix, white (0) to dark red (1).
inline Bytes heatmap_ppm(const Matrix<double>& v, int cell = 24) {
  const int w = static_cast<int>(v.cols()) * cell, h = static_cast<int>(v.rows()) * cell;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  Bytes out(header.begin(), header.end());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double a = std::clamp(v(y / cell, x / cell), 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(255 - 75 * a)));
      out.push_back(static_cast<std::uint8_t>(std::lround(255 * (1 - a))));
      out.push_back(static_cast<std::uint8_t>(std::lround(255 * (1 - a))));
    }
  return out;
}

struct Timeline {
  std::string clip_id;
  std::vector<TokenInfo> meta;
  std::vector<double> mass;
};

inline std::string timeline_csv(const Timeline& t, const std::vector<std::string>& source_ids) {
  std::ostringstream os;
  os.precision(17);
  os << "token,source,window,frame,position,mass\n";
  for (std::size_t i = 0; i < t.meta.size(); ++i)
    os << i << "," << source_ids[static_cast<std::size_t>(t.meta[i].source)] << "," << t.meta[i].window << "," << t.meta[i].frame << ","
       << t.meta[i].position << "," << t.mass[i] << "\n";
  return os.str();
}

// Writes relations.{csv,json}, relations.ppm and timelines/<clip>.csv under `dir`.
inline void emit_report(const fs::path& dir, const TaskRelationMatrix& m, const std::vector<Timeline>& timelines,
                        const std::vector<std::string>& source_ids) {
  fs::create_directories(dir / "timelines");
  write_text(dir / "relations.csv", relations_csv(m));
  write_text(dir / "relations.json", to_json(m).dump(2) + "\n");
  write_file(dir / "relations.ppm", heatmap_ppm(m.normalized));
  for (const auto& t : timelines) write_text(dir / "timelines" / (t.clip_id + ".csv"), timeline_csv(t, source_ids));
}

// Timelines for the first n validation clips of a task-specific run.
template <class S>
std::vector<Timeline> egot2s_timelines(const Translator<S>& tr, const std::vector<FrozenModel<S>>& backbones, const Dataset& val,
                                       const ModalityConfig& m, double stride_s, std::size_t n) {
  Dataset head = val;
  if (head.samples.size() > n) head.samples.resize(n);
  std::vector<const FrozenModel<S>*> bbs;
  std::vector<int> ids;
  for (std::size_t i = 0; i < backbones.size(); ++i) {
    bbs.push_back(&backbones[i]);
    ids.push_back(static_cast<int>(i));
  }
  std::vector<Timeline> out;
  for (const auto& c : prepare_clips(head, tr.spec().primary, m, bbs, ids, stride_s, false)) {
    Timeline t{c.clip_id, {}, {}};
    egot2s_clip_mass(tr, c, &t.mass, &t.meta);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace egot2
