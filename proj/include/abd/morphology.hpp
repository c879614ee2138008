#pragma once

// Kinematic trees: parsing (native JSON schema and a URDF subset),
// serialization, and the traversal orders used by the dynamics and the
// network. Link 0 is always the root; joint i connects parent(i) to link i.

#include <abd/errors.hpp>
#include <abd/spatial.hpp>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace abd {

enum class JointKind { kRevolute, kPrismatic, kFixed };

inline const char* to_string(JointKind k) {
  switch (k) {
    case JointKind::kRevolute: return "revolute";
    case JointKind::kPrismatic: return "prismatic";
    case JointKind::kFixed: return "fixed";
  }
  return "?";
}

struct JointLimits {
  double lower = 0.0;
  double upper = 0.0;
};

struct Joint {
  std::string name;
  JointKind kind = JointKind::kFixed;
  Vec3 axis = Vec3::UnitX();
  SpatialTransform parent_to_joint;
  int dof = 0;
  std::optional<JointLimits> limits;
  bool actuated = false;

  /// Joint motion subspace expressed in the child link frame.
  MotionSubspace motion_subspace() const {
    MotionSubspace S(6, dof);
    if (kind == JointKind::kRevolute) S.col(0) << axis, Vec3::Zero();
    if (kind == JointKind::kPrismatic) S.col(0) << Vec3::Zero(), axis;
    return S;
  }

  /// Pose of the child link frame in the parent link frame at position q.
  SpatialTransform child_pose(double q) const {
    switch (kind) {
      case JointKind::kRevolute:
        return parent_to_joint * SpatialTransform::FromRotation(Eigen::AngleAxisd(q, axis).toRotationMatrix());
      case JointKind::kPrismatic:
        return parent_to_joint * SpatialTransform::FromTranslation(axis * q);
      case JointKind::kFixed:
        break;
    }
    return parent_to_joint;
  }
};

struct Link {
  std::string name;
  int index = 0;
  SpatialInertia inertia;
  std::optional<int> parent;
  std::vector<int> children;
};

class KinematicTree {
 public:
  KinematicTree() = default;

  /// `joints[i - 1]` connects `links[i].parent` to link i. Parent/children
  /// fields of `links` are trusted; call sites go through build_tree().
  KinematicTree(std::vector<Link> links, std::vector<Joint> joints)
      : links_(std::move(links)), joints_(std::move(joints)) {
    finalize();
  }

  int size() const { return static_cast<int>(links_.size()); }
  const std::vector<Link>& links() const { return links_; }
  const Link& link(int i) const { return links_.at(i); }
  const Joint& joint(int i) const { return joints_.at(i - 1); }
  const std::vector<Joint>& joints() const { return joints_; }
  int parent(int i) const { return links_.at(i).parent.value_or(-1); }
  const std::vector<int>& children(int i) const { return links_.at(i).children; }

  /// Every child precedes its parent; siblings in ascending index order.
  const std::vector<int>& leaf_to_root() const { return leaf_to_root_; }
  /// Every parent precedes its children.
  const std::vector<int>& root_to_leaf() const { return root_to_leaf_; }

  int dof() const { return dof_; }
  /// Offset into q/qd for link i's joint, or -1 for the root and fixed joints.
  int q_index(int i) const { return q_index_.at(i); }
  /// Links whose joints are actuated, ascending; action slot k drives actuated_links()[k].
  const std::vector<int>& actuated_links() const { return actuated_; }
  int action_dim() const {
    int n = 0;
    for (int i : actuated_) n += joint(i).dof;
    return n;
  }
  /// Offset into q for action slot k.
  int action_q_index(int slot) const { return q_index(actuated_.at(slot)); }

  std::optional<int> find_link(const std::string& name) const {
    for (const auto& l : links_)
      if (l.name == name) return l.index;
    return std::nullopt;
  }

  /// True if `node` lies in the subtree rooted at `ancestor` (inclusive).
  bool in_subtree(int node, int ancestor) const {
    for (int i = node; i >= 0; i = parent(i))
      if (i == ancestor) return true;
    return false;
  }

  void set_inertia(int i, const SpatialInertia& I) { links_.at(i).inertia = I; }

 private:
  void finalize() {
    const int K = size();
    leaf_to_root_.clear();
    root_to_leaf_.clear();
    for (auto& l : links_) std::sort(l.children.begin(), l.children.end());
    if (K == 0) return;
    // Iterative DFS: preorder for root_to_leaf, postorder for leaf_to_root.
    std::vector<std::pair<int, std::size_t>> stack{{0, 0}};
    root_to_leaf_.push_back(0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      const auto& ch = links_[node].children;
      if (next < ch.size()) {
        int c = ch[next++];
        root_to_leaf_.push_back(c);
        stack.emplace_back(c, 0);
      } else {
        leaf_to_root_.push_back(node);
        stack.pop_back();
      }
    }
    q_index_.assign(K, -1);
    dof_ = 0;
    actuated_.clear();
    for (int i = 1; i < K; ++i) {
      const Joint& j = joint(i);
      if (j.dof > 0) {
        q_index_[i] = dof_;
        dof_ += j.dof;
        if (j.actuated) actuated_.push_back(i);
      }
    }
  }

  std::vector<Link> links_;
  std::vector<Joint> joints_;
  std::vector<int> leaf_to_root_;
  std::vector<int> root_to_leaf_;
  std::vector<int> q_index_;
  std::vector<int> actuated_;
  int dof_ = 0;
};

inline std::vector<int> leaf_to_root(const KinematicTree& tree) { return tree.leaf_to_root(); }
inline std::vector<int> root_to_leaf(const KinematicTree& tree) { return tree.root_to_leaf(); }

// ---------------------------------------------------------------------------
// Format-independent tree construction.

struct LinkSpec {
  std::string name;
  double mass = 0.0;
  Vec3 com = Vec3::Zero();
  Mat3 inertia_com = Mat3::Zero();
};

struct JointSpec {
  std::string name;
  std::string parent;
  std::string child;
  JointKind kind = JointKind::kFixed;
  Vec3 axis = Vec3::UnitX();
  SpatialTransform origin;
  std::optional<JointLimits> limits;
  std::optional<bool> actuated;
};

struct BuildOptions {
  /// Fixed-jointed leaf links lighter than this are folded into their parent.
  /// Negative disables merging.
  double merge_mass_threshold = -1.0;
};

namespace detail {

inline SpatialInertia checked_inertia(const LinkSpec& l) {
  SpatialInertia I = SpatialInertia::FromComInertia(l.mass, l.com, l.inertia_com);
  if (!(l.mass > 0.0) || !std::isfinite(l.mass))
    throw MissingInertiaError("link '" + l.name + "': mass must be positive and finite");
  if (!I.valid(1e-9)) throw MissingInertiaError("link '" + l.name + "': inertia is not positive definite");
  // Exact symmetry for downstream tolerance checks.
  I.rot_inertia = 0.5 * (I.rot_inertia + I.rot_inertia.transpose()).eval();
  return I;
}

}  // namespace detail

inline KinematicTree build_tree(std::vector<LinkSpec> links, std::vector<JointSpec> joints,
                                const BuildOptions& opts = {}) {
  if (links.empty()) throw ParseError("morphology has no links");
  std::map<std::string, int> by_name;
  for (int i = 0; i < static_cast<int>(links.size()); ++i)
    if (!by_name.emplace(links[i].name, i).second) throw ParseError("duplicate link name '" + links[i].name + "'");

  const int n = static_cast<int>(links.size());
  std::vector<int> parent_joint(n, -1);
  for (int j = 0; j < static_cast<int>(joints.size()); ++j) {
    const auto& js = joints[j];
    auto p = by_name.find(js.parent);
    auto c = by_name.find(js.child);
    if (p == by_name.end()) throw ParseError("joint '" + js.name + "': unknown parent link '" + js.parent + "'");
    if (c == by_name.end()) throw ParseError("joint '" + js.name + "': unknown child link '" + js.child + "'");
    if (p->second == c->second) throw CycleError("joint '" + js.name + "': link '" + js.child + "' is its own parent");
    if (parent_joint[c->second] >= 0)
      throw ParseError("link '" + js.child + "' has more than one parent joint");
    parent_joint[c->second] = j;
  }

  // Cycle detection: following parents from any link must reach a root.
  for (int i = 0; i < n; ++i) {
    int cur = i;
    for (int steps = 0; parent_joint[cur] >= 0; ++steps) {
      if (steps > n) throw CycleError("parent chain from link '" + links[i].name + "' revisits a link");
      cur = by_name.at(joints[parent_joint[cur]].parent);
    }
  }
  std::vector<int> roots;
  for (int i = 0; i < n; ++i)
    if (parent_joint[i] < 0) roots.push_back(i);
  if (roots.size() > 1)
    throw MultiRootError("morphology has " + std::to_string(roots.size()) + " root links ('" +
                         links[roots[0]].name + "', '" + links[roots[1]].name + "', ...)");

  for (auto& js : joints) {
    if (js.kind == JointKind::kFixed) {
      double nrm = js.axis.norm();
      js.axis = (std::isfinite(nrm) && nrm > 1e-9) ? Vec3(js.axis / nrm) : Vec3::UnitX();
      continue;
    }
    double nrm = js.axis.norm();
    if (!std::isfinite(nrm) || nrm < 1e-9) throw BadAxisError("joint '" + js.name + "': axis cannot be normalized");
    js.axis /= nrm;
    if (js.limits && !(js.limits->lower <= js.limits->upper))
      throw ParseError("joint '" + js.name + "': lower limit exceeds upper limit");
  }

  std::vector<bool> removed(n, false);
  std::vector<SpatialInertia> inertia(n);
  for (int i = 0; i < n; ++i)
    inertia[i] = SpatialInertia::FromComInertia(links[i].mass, links[i].com, links[i].inertia_com);

  if (opts.merge_mass_threshold >= 0.0) {
    bool changed = true;
    while (changed) {
      changed = false;
      for (int i = 0; i < n; ++i) {
        if (removed[i] || parent_joint[i] < 0) continue;
        const auto& js = joints[parent_joint[i]];
        if (js.kind != JointKind::kFixed || !(links[i].mass < opts.merge_mass_threshold)) continue;
        bool leaf = true;
        for (int c = 0; c < n; ++c)
          if (!removed[c] && parent_joint[c] >= 0 && joints[parent_joint[c]].parent == links[i].name) leaf = false;
        if (!leaf) continue;
        int p = by_name.at(js.parent);
        inertia[p] = inertia[p] + inertia[i].transformed(js.origin);
        links[p].mass = inertia[p].mass;
        links[p].com = inertia[p].com;
        links[p].inertia_com = inertia[p].inertia_about_com();
        removed[i] = true;
        changed = true;
      }
    }
  }

  // Root first, then document order.
  std::vector<int> doc_to_index(n, -1);
  std::vector<int> order{roots.empty() ? 0 : roots[0]};
  for (int i = 0; i < n; ++i)
    if (i != order[0] && !removed[i]) order.push_back(i);
  for (int k = 0; k < static_cast<int>(order.size()); ++k) doc_to_index[order[k]] = k;

  std::vector<Link> out_links(order.size());
  std::vector<Joint> out_joints(order.size() - 1);
  for (int k = 0; k < static_cast<int>(order.size()); ++k) {
    const LinkSpec& ls = links[order[k]];
    Link& l = out_links[k];
    l.name = ls.name;
    l.index = k;
    l.inertia = detail::checked_inertia(ls);
    if (k == 0) continue;
    const JointSpec& js = joints[parent_joint[order[k]]];
    int p = doc_to_index[by_name.at(js.parent)];
    l.parent = p;
    Joint& j = out_joints[k - 1];
    j.name = js.name;
    j.kind = js.kind;
    j.axis = js.axis;
    j.parent_to_joint = js.origin;
    j.dof = js.kind == JointKind::kFixed ? 0 : 1;
    j.limits = js.limits;
    j.actuated = js.actuated.value_or(j.dof > 0);
    if (j.actuated && j.dof == 0) throw ParseError("joint '" + js.name + "': fixed joints cannot be actuated");
    if (j.kind == JointKind::kFixed) j.limits.reset();
  }
  for (int k = 1; k < static_cast<int>(out_links.size()); ++k) out_links[*out_links[k].parent].children.push_back(k);
  return KinematicTree(std::move(out_links), std::move(out_joints));
}

// ---------------------------------------------------------------------------
// Native JSON format (see schema/morphology.schema.json).

namespace detail {

inline Vec3 json_vec3(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw ParseError(what + ": expected an array of 3 numbers");
  Vec3 v;
  for (int k = 0; k < 3; ++k) {
    if (!j[k].is_number()) throw ParseError(what + ": expected an array of 3 numbers");
    v[k] = j[k].get<double>();
  }
  return v;
}

inline JointKind parse_kind(const std::string& kind, const std::string& joint_name) {
  if (kind == "revolute") return JointKind::kRevolute;
  if (kind == "prismatic") return JointKind::kPrismatic;
  if (kind == "fixed") return JointKind::kFixed;
  throw UnsupportedJointError("joint '" + joint_name + "': unsupported kind '" + kind + "'");
}

inline Mat3 inertia_from6(double xx, double yy, double zz, double xy, double xz, double yz) {
  Mat3 I;
  I << xx, xy, xz,
       xy, yy, yz,
       xz, yz, zz;
  return I;
}

}  // namespace detail

inline KinematicTree parse_native(const nlohmann::json& doc, const BuildOptions& opts = {}) {
  if (!doc.is_object() || !doc.contains("links") || !doc["links"].is_array())
    throw ParseError("morphology document needs a 'links' array");
  std::vector<LinkSpec> links;
  for (const auto& jl : doc["links"]) {
    LinkSpec l;
    if (!jl.contains("name") || !jl["name"].is_string()) throw ParseError("link without a string 'name'");
    l.name = jl["name"].get<std::string>();
    if (!jl.contains("mass") || !jl["mass"].is_number()) throw MissingInertiaError("link '" + l.name + "': missing mass");
    if (!jl.contains("inertia")) throw MissingInertiaError("link '" + l.name + "': missing inertia");
    l.mass = jl["mass"].get<double>();
    l.com = jl.contains("com") ? detail::json_vec3(jl["com"], "link '" + l.name + "' com") : Vec3::Zero();
    const auto& in = jl["inertia"];
    if (!in.is_array() || in.size() != 6) throw MissingInertiaError("link '" + l.name + "': inertia needs 6 entries");
    std::array<double, 6> v{};
    for (int k = 0; k < 6; ++k) {
      if (!in[k].is_number()) throw MissingInertiaError("link '" + l.name + "': inertia entries must be numbers");
      v[k] = in[k].get<double>();
    }
    l.inertia_com = detail::inertia_from6(v[0], v[1], v[2], v[3], v[4], v[5]);
    links.push_back(std::move(l));
  }
  std::vector<JointSpec> joints;
  if (doc.contains("joints")) {
    for (const auto& jj : doc["joints"]) {
      JointSpec j;
      for (const char* key : {"name", "parent", "child", "kind"})
        if (!jj.contains(key) || !jj[key].is_string()) throw ParseError(std::string("joint missing string field '") + key + "'");
      j.name = jj["name"].get<std::string>();
      j.parent = jj["parent"].get<std::string>();
      j.child = jj["child"].get<std::string>();
      j.kind = detail::parse_kind(jj["kind"].get<std::string>(), j.name);
      if (jj.contains("axis")) {
        j.axis = detail::json_vec3(jj["axis"], "joint '" + j.name + "' axis");
      } else if (j.kind != JointKind::kFixed) {
        throw BadAxisError("joint '" + j.name + "': missing axis");
      }
      if (jj.contains("origin")) {
        const auto& o = jj["origin"];
        Vec3 xyz = o.contains("xyz") ? detail::json_vec3(o["xyz"], "joint '" + j.name + "' origin.xyz") : Vec3::Zero();
        Vec3 rpy = o.contains("rpy") ? detail::json_vec3(o["rpy"], "joint '" + j.name + "' origin.rpy") : Vec3::Zero();
        j.origin = SpatialTransform::FromXyzRpy(xyz, rpy);
      }
      if (jj.contains("limits") && !jj["limits"].is_null())
        j.limits = JointLimits{jj["limits"].at("lower").get<double>(), jj["limits"].at("upper").get<double>()};
      if (jj.contains("actuated")) j.actuated = jj["actuated"].get<bool>();
      joints.push_back(std::move(j));
    }
  }
  return build_tree(std::move(links), std::move(joints), opts);
}

inline KinematicTree parse_native_text(const std::string& text, const BuildOptions& opts = {}) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what());
  }
  try {
    return parse_native(doc, opts);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed morphology: ") + e.what());
  }
}

inline nlohmann::json serialize_native(const KinematicTree& tree) {
  nlohmann::json doc;
  doc["links"] = nlohmann::json::array();
  for (const auto& l : tree.links()) {
    Mat3 Ic = l.inertia.inertia_about_com();
    doc["links"].push_back({{"name", l.name},
                            {"mass", l.inertia.mass},
                            {"com", {l.inertia.com.x(), l.inertia.com.y(), l.inertia.com.z()}},
                            {"inertia", {Ic(0, 0), Ic(1, 1), Ic(2, 2), Ic(0, 1), Ic(0, 2), Ic(1, 2)}}});
  }
  doc["joints"] = nlohmann::json::array();
  for (int i = 1; i < tree.size(); ++i) {
    const Joint& j = tree.joint(i);
    const Vec3& t = j.parent_to_joint.translation;
    Vec3 rpy = j.parent_to_joint.rpy();
    nlohmann::json jj = {{"name", j.name},
                         {"parent", tree.link(tree.parent(i)).name},
                         {"child", tree.link(i).name},
                         {"kind", to_string(j.kind)},
                         {"axis", {j.axis.x(), j.axis.y(), j.axis.z()}},
                         {"origin", {{"xyz", {t.x(), t.y(), t.z()}}, {"rpy", {rpy.x(), rpy.y(), rpy.z()}}}},
                         {"actuated", j.actuated}};
    if (j.limits) jj["limits"] = {{"lower", j.limits->lower}, {"upper", j.limits->upper}};
    doc["joints"].push_back(std::move(jj));
  }
  return doc;
}

/// 64-bit FNV-1a over a canonical text form of the tree (numbers rounded to
/// 9 significant digits so that serialization round trips hash identically).
inline std::string tree_hash(const KinematicTree& tree) {
  std::string text;
  char buf[64];
  auto num = [&](double x) {
    if (std::abs(x) < 1e-12) x = 0.0;
    std::snprintf(buf, sizeof buf, "%.9g,", x);
    text += buf;
  };
  auto vec = [&](const auto& v) {
    for (Eigen::Index k = 0; k < v.size(); ++k) num(v.data()[k]);
  };
  for (const auto& l : tree.links()) {
    text += l.name + "|" + std::to_string(l.parent.value_or(-1)) + "|";
    num(l.inertia.mass);
    vec(l.inertia.com);
    vec(l.inertia.rot_inertia);
    if (l.index == 0) continue;
    const Joint& j = tree.joint(l.index);
    text += j.name + "|" + to_string(j.kind) + (j.actuated ? "|a|" : "|p|");
    vec(j.axis);
    vec(j.parent_to_joint.rotation);
    vec(j.parent_to_joint.translation);
    if (j.limits) {
      num(j.limits->lower);
      num(j.limits->upper);
    }
    text += ";";
  }
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline bool structurally_equal(const KinematicTree& a, const KinematicTree& b, double tol = 1e-9) {
  if (a.size() != b.size()) return false;
  auto close = [tol](const auto& x, const auto& y) { return (x - y).cwiseAbs().maxCoeff() <= tol; };
  for (int i = 0; i < a.size(); ++i) {
    const Link& la = a.link(i);
    const Link& lb = b.link(i);
    if (la.name != lb.name || la.parent != lb.parent || la.children != lb.children) return false;
    if (std::abs(la.inertia.mass - lb.inertia.mass) > tol || !close(la.inertia.com, lb.inertia.com) ||
        !close(la.inertia.rot_inertia, lb.inertia.rot_inertia))
      return false;
    if (i == 0) continue;
    const Joint& ja = a.joint(i);
    const Joint& jb = b.joint(i);
    if (ja.name != jb.name || ja.kind != jb.kind || ja.dof != jb.dof || ja.actuated != jb.actuated) return false;
    if (!close(ja.axis, jb.axis) || !close(ja.parent_to_joint.rotation, jb.parent_to_joint.rotation) ||
        !close(ja.parent_to_joint.translation, jb.parent_to_joint.translation))
      return false;
    if (ja.limits.has_value() != jb.limits.has_value()) return false;
    if (ja.limits && (std::abs(ja.limits->lower - jb.limits->lower) > tol ||
                      std::abs(ja.limits->upper - jb.limits->upper) > tol))
      return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// URDF subset: <robot>, <link><inertial>, <joint type="revolute|prismatic|fixed">.

struct UrdfOptions {
  /// Fixed-jointed leaf links below this mass (kg) are merged into their parent.
  double merge_mass_threshold = 1e-4;
};

namespace detail {

inline Vec3 parse_xyz_attr(const boost::property_tree::ptree& node, const std::string& attr, const Vec3& dflt) {
  auto s = node.get_optional<std::string>("<xmlattr>." + attr);
  if (!s) return dflt;
  std::istringstream in(*s);
  Vec3 v;
  if (!(in >> v.x() >> v.y() >> v.z())) throw ParseError("bad '" + attr + "' attribute: '" + *s + "'");
  return v;
}

inline SpatialTransform parse_origin(const boost::property_tree::ptree& parent) {
  auto o = parent.get_child_optional("origin");
  if (!o) return SpatialTransform::Identity();
  return SpatialTransform::FromXyzRpy(parse_xyz_attr(*o, "xyz", Vec3::Zero()), parse_xyz_attr(*o, "rpy", Vec3::Zero()));
}

}  // namespace detail

inline KinematicTree parse_urdf_subset(const std::string& xml, const UrdfOptions& opts = {}) {
  namespace pt = boost::property_tree;
  pt::ptree doc;
  try {
    std::istringstream in(xml);
    pt::read_xml(in, doc);
  } catch (const pt::xml_parser_error& e) {
    throw ParseError(std::string("URDF: ") + e.what());
  }
  auto robot = doc.get_child_optional("robot");
  if (!robot) throw ParseError("URDF: missing <robot> element");

  std::vector<LinkSpec> links;
  std::vector<JointSpec> joints;
  try {
    for (const auto& [tag, node] : *robot) {
      if (tag == "link") {
        LinkSpec l;
        l.name = node.get<std::string>("<xmlattr>.name");
        if (auto inertial = node.get_child_optional("inertial")) {
          SpatialTransform origin = detail::parse_origin(*inertial);
          l.mass = inertial->get<double>("mass.<xmlattr>.value");
          const auto& in = inertial->get_child("inertia.<xmlattr>");
          Mat3 I = detail::inertia_from6(in.get<double>("ixx"), in.get<double>("iyy"), in.get<double>("izz"),
                                         in.get<double>("ixy", 0.0), in.get<double>("ixz", 0.0),
                                         in.get<double>("iyz", 0.0));
          l.com = origin.translation;
          l.inertia_com = origin.rotation * I * origin.rotation.transpose();
        }
        links.push_back(std::move(l));
      } else if (tag == "joint") {
        JointSpec j;
        j.name = node.get<std::string>("<xmlattr>.name");
        std::string type = node.get<std::string>("<xmlattr>.type");
        j.kind = detail::parse_kind(type, j.name);
        j.parent = node.get<std::string>("parent.<xmlattr>.link");
        j.child = node.get<std::string>("child.<xmlattr>.link");
        j.origin = detail::parse_origin(node);
        if (auto ax = node.get_child_optional("axis")) j.axis = detail::parse_xyz_attr(*ax, "xyz", Vec3::UnitX());
        if (auto lim = node.get_child_optional("limit")) {
          auto lo = lim->get_optional<double>("<xmlattr>.lower");
          auto hi = lim->get_optional<double>("<xmlattr>.upper");
          if (lo && hi) j.limits = JointLimits{*lo, *hi};
        }
        joints.push_back(std::move(j));
      }
    }
  } catch (const pt::ptree_error& e) {
    throw ParseError(std::string("URDF: ") + e.what());
  }
  return build_tree(std::move(links), std::move(joints), BuildOptions{opts.merge_mass_threshold});
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Dispatches on extension: `.urdf`/`.xml` use the URDF subset, anything else the native format.
inline KinematicTree load_tree(const std::string& path) {
  std::string text = read_text_file(path);
  auto ends_with = [&](const std::string& suf) {
    return path.size() >= suf.size() && path.compare(path.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends_with(".urdf") || ends_with(".xml")) return parse_urdf_subset(text);
  return parse_native_text(text);
}

}  // namespace abd
