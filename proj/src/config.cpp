#include "driftalign/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

namespace driftalign {

using json = nlohmann::ordered_json;

namespace {

// Each section is described once; the same table drives dump and parse.
template <typename S>
struct Field {
  const char* key;
  std::function<json(const S&)> get;
  std::function<void(S&, const json&)> set;
};

template <typename S, typename T>
Field<S> field(const char* key, T S::*member) {
  return {key, [member](const S& s) { return json(s.*member); },
          [member](S& s, const json& j) { s.*member = j.get<T>(); }};
}

template <typename S>
json dump_section(const S& s, const std::vector<Field<S>>& fields) {
  json j = json::object();
  for (const auto& f : fields) j[f.key] = f.get(s);
  return j;
}

template <typename S>
void parse_section(S& s, const json& j, const std::vector<Field<S>>& fields, const std::string& where) {
  if (!j.is_object()) throw Error("config", where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const Field<S>& f) { return key == f.key; });
    if (it == fields.end()) throw Error("config", "unknown key '" + where + "." + key + "'");
    try {
      it->set(s, value);
    } catch (const json::exception&) {
      throw Error("config", "wrong type for '" + where + "." + key + "'");
    }
  }
}

const std::vector<Field<FilterParams>>& filter_fields() {
  static const std::vector<Field<FilterParams>> f = {
      field("voxel", &FilterParams::voxel),
      field("theta_loc", &FilterParams::theta_loc),
      field("theta_cnt", &FilterParams::theta_cnt),
      {"scope", [](const FilterParams& s) { return json(s.scope == FilterScope::Global ? "global" : "per_frame"); },
       [](FilterParams& s, const json& j) {
         const auto v = j.get<std::string>();
         if (v == "global") {
           s.scope = FilterScope::Global;
         } else if (v == "per_frame") {
           s.scope = FilterScope::PerFrame;
         } else {
           throw Error("config", "filter.scope must be 'global' or 'per_frame'");
         }
       }},
  };
  return f;
}

const std::vector<Field<AlignParams>>& align_fields() {
  static const std::vector<Field<AlignParams>> f = {
      field("s_vox", &AlignParams::s_vox),
      field("d_max", &AlignParams::d_max),
      field("iters", &AlignParams::iters),
      field("lr_camera", &AlignParams::lr_camera),
      field("lr_field", &AlignParams::lr_field),
      field("lambda_color", &AlignParams::lambda_color),
      field("lambda_corr", &AlignParams::lambda_corr),
      field("lambda_tv", &AlignParams::lambda_tv),
      field("theta_d", &AlignParams::theta_d),
      field("theta_c", &AlignParams::theta_c),
      field("sigma_d", &AlignParams::sigma_d),
      field("sigma_c", &AlignParams::sigma_c),
      field("max_correspondences", &AlignParams::max_correspondences),
      field("max_pairs", &AlignParams::max_pairs),
      field("tv_samples", &AlignParams::tv_samples),
      field("normal_k", &AlignParams::normal_k),
      field("color_radius_factor", &AlignParams::color_radius_factor),
      field("unalignable_patience", &AlignParams::unalignable_patience),
      field("freeze_field", &AlignParams::freeze_field),
      field("field_padding", &AlignParams::field_padding),
  };
  return f;
}

const std::vector<Field<FieldConfig>>& field_config_fields() {
  static const std::vector<Field<FieldConfig>> f = {
      field("levels", &FieldConfig::levels),
      field("features", &FieldConfig::features),
      field("log2_table", &FieldConfig::log2_table),
      field("hidden", &FieldConfig::hidden),
      field("coarse_divisions", &FieldConfig::coarse_divisions),
      field("output_scale", &FieldConfig::output_scale),
      field("feature_init", &FieldConfig::feature_init),
      field("embedding_init", &FieldConfig::embedding_init),
  };
  return f;
}

const std::vector<Field<GlobalParams>>& global_fields() {
  static const std::vector<Field<GlobalParams>> f = {
      field("iters", &GlobalParams::iters),
      field("lambda_anchor", &GlobalParams::lambda_anchor),
      field("lambda_color", &GlobalParams::lambda_color),
      field("d_max", &GlobalParams::d_max),
      field("neighbors", &GlobalParams::neighbors),
      field("anchor_samples", &GlobalParams::anchor_samples),
      field("lr_camera", &GlobalParams::lr_camera),
      field("lr_field", &GlobalParams::lr_field),
      field("color_radius", &GlobalParams::color_radius),
      field("divergence_patience", &GlobalParams::divergence_patience),
      field("freeze_field", &GlobalParams::freeze_field),
  };
  return f;
}

const std::vector<Field<InverseParams>>& inverse_fields() {
  static const std::vector<Field<InverseParams>> f = {
      field("m_per_frame", &InverseParams::m_per_frame),
      field("holdout_per_frame", &InverseParams::holdout_per_frame),
      field("iters", &InverseParams::iters),
      field("batch", &InverseParams::batch),
      field("lambda_tv", &InverseParams::lambda_tv),
      field("tv_offset", &InverseParams::tv_offset),
      field("tv_samples", &InverseParams::tv_samples),
      field("lr", &InverseParams::lr),
      field("embedding_dim", &InverseParams::embedding_dim),
      field("padding", &InverseParams::padding),
  };
  return f;
}

const std::vector<Field<SplatParams>>& splat_fields() {
  static const std::vector<Field<SplatParams>> f = {
      field("target_count", &SplatParams::target_count),
      field("k", &SplatParams::k),
      field("opacity", &SplatParams::opacity),
  };
  return f;
}

const std::vector<Field<MetricParams>>& metric_fields() {
  static const std::vector<Field<MetricParams>> f = {
      field("chamfer_samples", &MetricParams::chamfer_samples),
      field("thickness_k", &MetricParams::thickness_k),
      field("deformation_stride", &MetricParams::deformation_stride),
  };
  return f;
}

json to_json(const Config& c) {
  json j;
  j["defaults_version"] = c.defaults_version;
  j["stride"] = c.stride;
  j["seed"] = c.seed;
  j["filter"] = dump_section(c.filter, filter_fields());
  j["align"] = dump_section(c.align, align_fields());
  j["field"] = dump_section(c.align.field, field_config_fields());
  j["inverse_field"] = dump_section(c.inverse.field, field_config_fields());
  j["global"] = dump_section(c.global, global_fields());
  j["inverse"] = dump_section(c.inverse, inverse_fields());
  j["splat"] = dump_section(c.splat, splat_fields());
  j["metrics"] = dump_section(c.metrics, metric_fields());
  return j;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw Error("config", what);
}

void check_field(const FieldConfig& f, const std::string& where) {
  require(f.levels >= 1 && f.features >= 1 && f.hidden >= 1, where + ": levels, features and hidden must be >= 1");
  require(f.log2_table >= 4 && f.log2_table <= 24, where + ".log2_table must be in [4, 24]");
  require(f.coarse_divisions > 0.0 && f.output_scale > 0.0, where + ": scales must be positive");
  require(f.feature_init >= 0.0 && f.embedding_init >= 0.0, where + ": init ranges must be nonnegative");
}

}  // namespace

void Config::validate() const {
  require(defaults_version == kDefaultsVersion,
          "defaults_version " + std::to_string(defaults_version) + " is not supported (expected " +
              std::to_string(kDefaultsVersion) + ")");
  require(stride >= 1, "stride must be >= 1");
  require(filter.voxel > 0.0, "filter.voxel must be positive");
  require(filter.theta_loc >= 0.0 && filter.theta_loc <= 100.0, "filter.theta_loc must be in [0, 100]");
  require(filter.theta_cnt >= 0.0 && filter.theta_cnt <= 100.0, "filter.theta_cnt must be in [0, 100]");

  const auto& a = align;
  require(!a.s_vox.empty(), "align.s_vox must not be empty");
  require(a.s_vox.size() == a.d_max.size() && a.s_vox.size() == a.iters.size(),
          "align schedules s_vox, d_max and iters must have equal length");
  for (double v : a.s_vox) require(v > 0.0, "align.s_vox entries must be positive");
  for (double v : a.d_max) require(v > 0.0, "align.d_max entries must be positive");
  for (int v : a.iters) require(v >= 0, "align.iters entries must be >= 0");
  require(a.lambda_color >= 0.0, "align.lambda_color must be >= 0");
  require(a.lambda_corr >= 0.0, "align.lambda_corr must be >= 0");
  require(a.lambda_tv >= 0.0, "align.lambda_tv must be >= 0");
  require(a.theta_d >= 0.0 && a.theta_d <= 100.0, "align.theta_d must be in [0, 100]");
  require(a.theta_c >= 0.0 && a.theta_c <= 100.0, "align.theta_c must be in [0, 100]");
  require(a.sigma_d >= 0.0 && a.sigma_c >= 0.0, "align.sigma_d and sigma_c must be >= 0");
  require(a.lr_camera > 0.0 && a.lr_field > 0.0, "align learning rates must be positive");
  require(a.max_correspondences >= 0 && a.max_pairs >= 0, "align correspondence caps must be >= 0");
  require(a.tv_samples >= 0 && a.normal_k >= 3, "align.tv_samples >= 0 and normal_k >= 3 required");
  require(a.color_radius_factor > 0.0, "align.color_radius_factor must be positive");
  require(a.unalignable_patience >= 1, "align.unalignable_patience must be >= 1");
  require(a.field_padding >= 0.0, "align.field_padding must be >= 0");
  check_field(a.field, "field");
  check_field(inverse.field, "inverse_field");

  const auto& g = global;
  require(g.iters >= 0, "global.iters must be >= 0");
  require(g.lambda_anchor >= 0.0, "global.lambda_anchor must be >= 0");
  require(g.lambda_color >= 0.0, "global.lambda_color must be >= 0");
  require(g.d_max > 0.0 && g.color_radius > 0.0, "global.d_max and color_radius must be positive");
  require(g.neighbors >= 1 && g.anchor_samples >= 1, "global.neighbors and anchor_samples must be >= 1");
  require(g.lr_camera > 0.0 && g.lr_field > 0.0, "global learning rates must be positive");
  require(g.divergence_patience >= 1, "global.divergence_patience must be >= 1");

  const auto& i = inverse;
  require(i.m_per_frame >= 1 && i.holdout_per_frame >= 0, "inverse sample counts invalid");
  require(i.iters >= 0 && i.batch >= 1 && i.tv_samples >= 0, "inverse iteration settings invalid");
  require(i.lambda_tv >= 0.0, "inverse.lambda_tv must be >= 0");
  require(i.tv_offset > 0.0 && i.lr > 0.0, "inverse.tv_offset and lr must be positive");
  require(i.embedding_dim >= 1, "inverse.embedding_dim must be >= 1");
  require(i.padding >= 0.0, "inverse.padding must be >= 0");

  require(splat.k >= 1, "splat.k must be >= 1");
  require(splat.opacity >= 0.0 && splat.opacity <= 1.0, "splat.opacity must be in [0, 1]");
  require(metrics.thickness_k >= 3 && metrics.deformation_stride >= 1, "metric settings invalid");
}

AlignParams Config::align_params() const {
  AlignParams p = align;
  p.seed = seed;
  return p;
}

GlobalParams Config::global_params() const {
  GlobalParams p = global;
  p.seed = seed + 1;
  return p;
}

InverseParams Config::inverse_params() const {
  InverseParams p = inverse;
  p.seed = seed + 2;
  return p;
}

SplatParams Config::splat_params() const {
  SplatParams p = splat;
  p.seed = seed + 3;
  return p;
}

std::string Config::hash() const {
  const std::string text = config_to_json(*this, -1);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_to_json(const Config& config, int indent) { return to_json(config).dump(indent); }

Config config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error("config", std::string("malformed config: ") + e.what());
  }
  if (!j.is_object()) throw Error("config", "config must be a JSON object");
  if (!j.contains("defaults_version")) throw Error("config", "config lacks 'defaults_version'");
  Config c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "defaults_version") {
        c.defaults_version = value.get<int>();
      } else if (key == "stride") {
        c.stride = value.get<int>();
      } else if (key == "seed") {
        c.seed = value.get<uint64_t>();
      } else if (key == "filter") {
        parse_section(c.filter, value, filter_fields(), key);
      } else if (key == "align") {
        parse_section(c.align, value, align_fields(), key);
      } else if (key == "field") {
        parse_section(c.align.field, value, field_config_fields(), key);
      } else if (key == "inverse_field") {
        parse_section(c.inverse.field, value, field_config_fields(), key);
      } else if (key == "global") {
        parse_section(c.global, value, global_fields(), key);
      } else if (key == "inverse") {
        parse_section(c.inverse, value, inverse_fields(), key);
      } else if (key == "splat") {
        parse_section(c.splat, value, splat_fields(), key);
      } else if (key == "metrics") {
        parse_section(c.metrics, value, metric_fields(), key);
      } else {
        throw Error("config", "unknown key '" + key + "'");
      }
    } catch (const json::exception&) {
      throw Error("config", "wrong type for '" + key + "'");
    }
  }
  c.validate();
  return c;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

}  // namespace driftalign
