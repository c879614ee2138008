#include <abd/morphology.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace abd {
namespace {

using nlohmann::json;

json link_doc(const std::string& name, double mass = 1.0) {
  return {{"name", name}, {"mass", mass}, {"com", {0, 0, 0.1}}, {"inertia", {0.1, 0.1, 0.1, 0, 0, 0}}};
}

json joint_doc(const std::string& name, const std::string& parent, const std::string& child,
               const std::string& kind = "revolute") {
  return {{"name", name}, {"parent", parent}, {"child", child}, {"kind", kind}, {"axis", {0, 1, 0}},
          {"origin", {{"xyz", {0, 0, 0.5}}, {"rpy", {0, 0, 0}}}}, {"actuated", kind != "fixed"}};
}

/// Brute-force check: each link appears once and every child precedes its parent.
bool valid_leaf_to_root(const KinematicTree& t, const std::vector<int>& order) {
  if (static_cast<int>(order.size()) != t.size()) return false;
  std::vector<int> pos(t.size(), -1);
  for (int k = 0; k < static_cast<int>(order.size()); ++k) {
    if (order[k] < 0 || order[k] >= t.size() || pos[order[k]] >= 0) return false;
    pos[order[k]] = k;
  }
  for (int i = 1; i < t.size(); ++i)
    if (pos[i] >= pos[t.parent(i)]) return false;
  return true;
}

TEST(MorphologyTest, TwoLinkDocument) {
  json doc = {{"links", {link_doc("base"), link_doc("arm")}}, {"joints", {joint_doc("j", "base", "arm")}}};
  KinematicTree t = parse_native(doc);
  EXPECT_EQ(t.size(), 2);
  EXPECT_EQ(t.leaf_to_root(), (std::vector<int>{1, 0}));
  EXPECT_EQ(t.dof(), 1);
  EXPECT_EQ(t.action_dim(), 1);
  EXPECT_EQ(t.parent(1), 0);
  EXPECT_FALSE(t.link(0).parent.has_value());
}

TEST(MorphologyTest, SelfParentIsCycle) {
  json doc = {{"links", {link_doc("base"), link_doc("a")}}, {"joints", {joint_doc("j", "a", "a")}}};
  EXPECT_THROW(parse_native(doc), CycleError);
}

TEST(MorphologyTest, LongerCycleDetected) {
  json doc = {{"links", {link_doc("base"), link_doc("a"), link_doc("b")}},
              {"joints", {joint_doc("j1", "a", "b"), joint_doc("j2", "b", "a")}}};
  EXPECT_THROW(parse_native(doc), CycleError);
}

TEST(MorphologyTest, MultipleRoots) {
  json doc = {{"links", {link_doc("base"), link_doc("a"), link_doc("island")}}, {"joints", {joint_doc("j", "base", "a")}}};
  EXPECT_THROW(parse_native(doc), MultiRootError);
}

TEST(MorphologyTest, MissingOrInvalidInertia) {
  json doc = {{"links", {link_doc("base"), {{"name", "a"}, {"mass", 1.0}}}}, {"joints", {joint_doc("j", "base", "a")}}};
  EXPECT_THROW(parse_native(doc), MissingInertiaError);
  json neg = {{"links", {link_doc("base"), link_doc("a", -1.0)}}, {"joints", {joint_doc("j", "base", "a")}}};
  EXPECT_THROW(parse_native(neg), MissingInertiaError);
}

TEST(MorphologyTest, BadAxis) {
  json j = joint_doc("j", "base", "a");
  j["axis"] = {0, 0, 0};
  json doc = {{"links", {link_doc("base"), link_doc("a")}}, {"joints", {j}}};
  EXPECT_THROW(parse_native(doc), BadAxisError);
}

TEST(MorphologyTest, AxisIsNormalized) {
  json j = joint_doc("j", "base", "a");
  j["axis"] = {0, 3, 4};
  json doc = {{"links", {link_doc("base"), link_doc("a")}}, {"joints", {j}}};
  EXPECT_NEAR(parse_native(doc).joint(1).axis.norm(), 1.0, 1e-12);
}

TEST(MorphologyTest, RootGetsIndexZeroThenDocumentOrder) {
  json doc = {{"links", {link_doc("tip"), link_doc("base"), link_doc("mid")}},
              {"joints", {joint_doc("j1", "base", "mid"), joint_doc("j2", "mid", "tip")}}};
  KinematicTree t = parse_native(doc);
  EXPECT_EQ(t.link(0).name, "base");
  EXPECT_EQ(t.link(1).name, "tip");
  EXPECT_EQ(t.link(2).name, "mid");
  EXPECT_EQ(t.parent(1), 2);
  EXPECT_TRUE(valid_leaf_to_root(t, t.leaf_to_root()));
  EXPECT_EQ(t.leaf_to_root(), (std::vector<int>{1, 2, 0}));
}

TEST(MorphologyTest, BinaryTreeLeavesPrecedeSharedParent) {
  // 0 -> {1, 2}, 1 -> {3, 4}
  json doc = {{"links", {link_doc("r"), link_doc("a"), link_doc("b"), link_doc("c"), link_doc("d")}},
              {"joints", {joint_doc("ja", "r", "a"), joint_doc("jb", "r", "b"), joint_doc("jc", "a", "c"),
                          joint_doc("jd", "a", "d")}}};
  KinematicTree t = parse_native(doc);
  const auto& order = t.leaf_to_root();
  EXPECT_TRUE(valid_leaf_to_root(t, order));
  auto pos = [&](int i) { return std::find(order.begin(), order.end(), i) - order.begin(); };
  EXPECT_LT(pos(3), pos(1));
  EXPECT_LT(pos(4), pos(1));
  // Siblings in ascending index order.
  EXPECT_LT(pos(3), pos(4));
  EXPECT_LT(pos(1), pos(2));
}

TEST(MorphologyTest, ChainAndSingleLinkOrders) {
  json chain = {{"links", {link_doc("l0"), link_doc("l1"), link_doc("l2")}},
                {"joints", {joint_doc("j1", "l0", "l1"), joint_doc("j2", "l1", "l2")}}};
  KinematicTree t = parse_native(chain);
  EXPECT_EQ(leaf_to_root(t), (std::vector<int>{2, 1, 0}));
  EXPECT_EQ(root_to_leaf(t), (std::vector<int>{0, 1, 2}));
  json single = {{"links", {link_doc("only")}}};
  KinematicTree s = parse_native(single);
  EXPECT_EQ(leaf_to_root(s), (std::vector<int>{0}));
  EXPECT_EQ(root_to_leaf(s), (std::vector<int>{0}));
  EXPECT_EQ(s.dof(), 0);
}

TEST(MorphologyTest, RandomTreesHaveValidOrders) {
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 200; ++trial) {
    KinematicTree t = testing::random_tree(rng, {.links = 10});
    EXPECT_TRUE(valid_leaf_to_root(t, t.leaf_to_root()));
    std::vector<int> rev(t.root_to_leaf().rbegin(), t.root_to_leaf().rend());
    EXPECT_TRUE(valid_leaf_to_root(t, rev));
    for (int i = 0; i < t.size(); ++i)
      for (int c : t.children(i)) EXPECT_EQ(t.parent(c), i);
    // Deterministic given the tree.
    KinematicTree again(t.links(), t.joints());
    EXPECT_EQ(again.leaf_to_root(), t.leaf_to_root());
  }
}

TEST(MorphologyTest, ActionSlotsMatchActuatedJoints) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    KinematicTree t = testing::random_tree(rng, {.links = 8});
    int actuated = 0;
    for (int i = 1; i < t.size(); ++i)
      if (t.joint(i).dof >= 1 && t.joint(i).actuated) ++actuated;
    EXPECT_EQ(t.action_dim(), actuated);
  }
}

TEST(MorphologyTest, FixedJointsCannotBeActuated) {
  json j = joint_doc("j", "base", "a", "fixed");
  j["actuated"] = true;
  json doc = {{"links", {link_doc("base"), link_doc("a")}}, {"joints", {j}}};
  EXPECT_THROW(parse_native(doc), ParseError);
}

TEST(MorphologyTest, UnknownKindIsUnsupported) {
  json doc = {{"links", {link_doc("base"), link_doc("a")}}, {"joints", {joint_doc("j", "base", "a", "spherical")}}};
  EXPECT_THROW(parse_native(doc), UnsupportedJointError);
}

TEST(MorphologyTest, NativeRoundTrip) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    KinematicTree t = testing::random_tree(rng, {.links = 7, .limits = true});
    KinematicTree back = parse_native(serialize_native(t));
    EXPECT_TRUE(structurally_equal(t, back, 1e-9));
    EXPECT_EQ(tree_hash(back), tree_hash(parse_native(serialize_native(back))));
  }
}

TEST(MorphologyTest, ShippedModelsParse) {
  for (const char* f : {"models/double_pendulum.json", "models/pendulum.json", "models/chain4.json",
                        "models/hopper.json", "models/double_pendulum.urdf"}) {
    EXPECT_NO_THROW(load_tree(testing::data_path(f))) << f;
  }
  KinematicTree hopper = load_tree(testing::data_path("models/hopper.json"));
  EXPECT_EQ(hopper.size(), 7);
  EXPECT_EQ(hopper.dof(), 6);
  EXPECT_EQ(hopper.action_dim(), 3);
}

TEST(MorphologyTest, SchemaFileNamesEveryField) {
  json schema = json::parse(read_text_file(testing::data_path("schema/morphology.schema.json")));
  const auto& link_props = schema["properties"]["links"]["items"]["properties"];
  for (const char* k : {"name", "mass", "com", "inertia"}) EXPECT_TRUE(link_props.contains(k)) << k;
  const auto& joint_props = schema["properties"]["joints"]["items"]["properties"];
  for (const char* k : {"name", "parent", "child", "kind", "axis", "origin", "limits", "actuated"})
    EXPECT_TRUE(joint_props.contains(k)) << k;
  // Every key the serializer writes is declared in the schema.
  std::mt19937_64 rng(23);
  json doc = serialize_native(testing::random_tree(rng, {.links = 4, .limits = true}));
  for (const auto& l : doc["links"])
    for (const auto& [k, v] : l.items()) EXPECT_TRUE(link_props.contains(k)) << k;
  for (const auto& j : doc["joints"])
    for (const auto& [k, v] : j.items()) EXPECT_TRUE(joint_props.contains(k)) << k;
}

// ---------------------------------------------------------------------------
// URDF subset.

const char* kUrdfHead = R"(<?xml version="1.0"?><robot name="r">)";

std::string urdf_link(const std::string& name, double mass, const std::string& xyz = "0 0 0.1") {
  return "<link name=\"" + name + "\"><inertial><origin xyz=\"" + xyz + "\" rpy=\"0 0 0\"/><mass value=\"" +
         std::to_string(mass) + "\"/><inertia ixx=\"0.1\" iyy=\"0.1\" izz=\"0.1\" ixy=\"0\" ixz=\"0\" iyz=\"0\"/>" +
         "</inertial></link>";
}

TEST(UrdfTest, ContinuousJointIsUnsupported) {
  std::string xml = std::string(kUrdfHead) + urdf_link("base", 1) + urdf_link("wheel", 1) +
                    R"(<joint name="spin" type="continuous"><parent link="base"/><child link="wheel"/>)"
                    R"(<axis xyz="0 0 1"/></joint></robot>)";
  try {
    parse_urdf_subset(xml);
    FAIL() << "expected UnsupportedJointError";
  } catch (const UnsupportedJointError& e) {
    EXPECT_NE(std::string(e.what()).find("spin"), std::string::npos);
  }
}

TEST(UrdfTest, MalformedXml) {
  EXPECT_THROW(parse_urdf_subset("<robot><link name="), ParseError);
  EXPECT_THROW(parse_urdf_subset("<notarobot/>"), ParseError);
}

TEST(UrdfTest, LightFixedSensorLinkIsMerged) {
  std::string xml = std::string(kUrdfHead) + urdf_link("base", 1) + urdf_link("arm", 2) +
                    urdf_link("camera", 1e-6, "0.01 0 0") +
                    R"(<joint name="j" type="revolute"><parent link="base"/><child link="arm"/>)"
                    R"(<origin xyz="0 0 0.3" rpy="0 0 0"/><axis xyz="0 1 0"/></joint>)"
                    R"(<joint name="cam_mount" type="fixed"><parent link="arm"/><child link="camera"/>)"
                    R"(<origin xyz="0.2 0 0.5" rpy="0 0.3 0"/></joint></robot>)";
  KinematicTree t = parse_urdf_subset(xml);
  ASSERT_EQ(t.size(), 2);
  EXPECT_FALSE(t.find_link("camera").has_value());
  const SpatialInertia& arm = t.link(1).inertia;
  EXPECT_LE(std::abs(arm.mass - 2.0), 1e-6 + 1e-12);

  // Oracle: dense spatial-inertia addition in the arm frame.
  SpatialInertia arm0 = SpatialInertia::FromComInertia(2.0, Vec3(0, 0, 0.1), 0.1 * Mat3::Identity());
  SpatialInertia cam = SpatialInertia::FromComInertia(1e-6, Vec3(0.01, 0, 0), 0.1 * Mat3::Identity());
  SpatialTransform mount = SpatialTransform::FromXyzRpy(Vec3(0.2, 0, 0.5), Vec3(0, 0.3, 0));
  Mat6 Minv = testing::dense_motion_transform(mount).inverse();
  Mat6 expected = arm0.matrix() + Minv.transpose() * cam.matrix() * Minv;
  EXPECT_LT((arm.matrix() - expected).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(UrdfTest, HeavyFixedLinkIsKept) {
  std::string xml = std::string(kUrdfHead) + urdf_link("base", 1) + urdf_link("arm", 2) + urdf_link("tool", 0.5) +
                    R"(<joint name="j" type="revolute"><parent link="base"/><child link="arm"/>)"
                    R"(<axis xyz="0 1 0"/></joint>)"
                    R"(<joint name="tool_mount" type="fixed"><parent link="arm"/><child link="tool"/></joint></robot>)";
  KinematicTree t = parse_urdf_subset(xml);
  ASSERT_EQ(t.size(), 3);
  EXPECT_EQ(t.joint(2).dof, 0);
  EXPECT_FALSE(t.joint(2).actuated);
  EXPECT_EQ(t.action_dim(), 1);
}

TEST(UrdfTest, DoublePendulumMatchesNative) {
  KinematicTree from_urdf = load_tree(testing::data_path("models/double_pendulum.urdf"));
  KinematicTree from_json = load_tree(testing::data_path("models/double_pendulum.json"));
  EXPECT_TRUE(structurally_equal(from_urdf, from_json, 1e-12));
}

}  // namespace
}  // namespace abd
