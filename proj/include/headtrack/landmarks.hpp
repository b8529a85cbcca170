#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <initializer_list>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "headtrack/error.hpp"

namespace headtrack {

struct Landmark2D {
  int id = 0;
  double u = 0.0;
  double v = 0.0;
  bool valid = true;

  Eigen::Vector2d pixel() const { return {u, v}; }
};

struct Landmark3D {
  int id = 0;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  bool valid = true;
};

namespace detail {

template <typename Entry>
void validate_ids(const std::vector<Entry>& entries) {
  for (std::size_t i = 1; i < entries.size(); ++i) {
    if (entries[i].id <= entries[i - 1].id) {
      throw Error(ErrorCode::InvalidArgument, "landmark ids must be strictly increasing");
    }
  }
}

template <typename Entry>
const Entry* find_id(const std::vector<Entry>& entries, int id) {
  auto it = std::lower_bound(entries.begin(), entries.end(), id,
                             [](const Entry& e, int key) { return e.id < key; });
  if (it == entries.end() || it->id != id) return nullptr;
  return &*it;
}

}  // namespace detail

/// Index-keyed landmark collection; entries are kept sorted by id.
template <typename Entry>
struct LandmarkSet {
  std::vector<Entry> entries;

  void validate() const { detail::validate_ids(entries); }

  const Entry* find(int id) const { return detail::find_id(entries, id); }

  const Entry* find_valid(int id) const {
    const Entry* e = find(id);
    return (e != nullptr && e->valid) ? e : nullptr;
  }

  std::size_t valid_count() const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [](const Entry& e) { return e.valid; }));
  }

  std::set<int> ids() const {
    std::set<int> out;
    for (const auto& e : entries) out.insert(e.id);
    return out;
  }

  std::set<int> valid_ids() const {
    std::set<int> out;
    for (const auto& e : entries)
      if (e.valid) out.insert(e.id);
    return out;
  }

  /// Inserts keeping ids sorted; replaces an existing entry with the same id.
  void insert(const Entry& e) {
    auto it = std::lower_bound(entries.begin(), entries.end(), e.id,
                               [](const Entry& x, int key) { return x.id < key; });
    if (it != entries.end() && it->id == e.id) {
      *it = e;
    } else {
      entries.insert(it, e);
    }
  }
};

using LandmarkSet2D = LandmarkSet<Landmark2D>;
using LandmarkSet3D = LandmarkSet<Landmark3D>;

/// A named group of landmark ids used to restrict a solver to a facial region.
struct LandmarkSubsetConfig {
  std::string name;
  std::set<int> ids;

  static LandmarkSubsetConfig all_of(const LandmarkSet3D& tmpl, std::string name = "all") {
    return {std::move(name), tmpl.ids()};
  }

  bool contains(int id) const { return ids.count(id) != 0; }

  /// Throws unless the subset is non-empty and every id exists in `tmpl`.
  void validate_against(const LandmarkSet3D& tmpl) const {
    if (ids.empty()) throw Error(ErrorCode::InvalidArgument, "landmark subset '" + name + "' is empty");
    for (int id : ids) {
      if (tmpl.find(id) == nullptr) {
        throw Error(ErrorCode::InvalidArgument,
                    "landmark subset '" + name + "' references unknown id " + std::to_string(id));
      }
    }
  }
};

/// Regions of the 68-point Multi-PIE layout.
struct FaceRegion {
  std::string_view name;
  int first;
  int last;  ///< inclusive
};

inline constexpr std::array<FaceRegion, 5> kFaceRegions{{
    {"jaw", 0, 16},
    {"eyebrows", 17, 26},
    {"nose", 27, 35},
    {"eyes", 36, 47},
    {"mouth", 48, 67},
}};

inline constexpr int kFaceLandmarkCount = 68;

/// Named subsets of the 68-point layout: eyes_nose, eyes_nose_eyebrows,
/// eyes_nose_mouth, union (everything but the jaw line) and marle68.
inline LandmarkSubsetConfig standard_subset(std::string_view name) {
  auto region_ids = [](std::initializer_list<std::string_view> regions) {
    std::set<int> ids;
    for (const auto& r : kFaceRegions) {
      if (std::find(regions.begin(), regions.end(), r.name) == regions.end()) continue;
      for (int i = r.first; i <= r.last; ++i) ids.insert(i);
    }
    return ids;
  };
  LandmarkSubsetConfig out;
  out.name = std::string(name);
  if (name == "eyes_nose") {
    out.ids = region_ids({"eyes", "nose"});
  } else if (name == "eyes_nose_eyebrows") {
    out.ids = region_ids({"eyes", "nose", "eyebrows"});
  } else if (name == "eyes_nose_mouth") {
    out.ids = region_ids({"eyes", "nose", "mouth"});
  } else if (name == "union") {
    out.ids = region_ids({"eyes", "nose", "eyebrows", "mouth"});
  } else if (name == "marle68") {
    out.ids = region_ids({"jaw", "eyes", "nose", "eyebrows", "mouth"});
  } else {
    throw Error(ErrorCode::UnknownKind, "unknown landmark subset '" + std::string(name) + "'");
  }
  return out;
}

}  // namespace headtrack
