#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <json.hpp>

#include "disco/error.hpp"
#include "disco/rng.hpp"

namespace disco {

// hard cap on objects per scene; attention mask sizes depend on it
constexpr int kNMax = 8;

struct BoundingBox {
  double x = 0, y = 0, w = 0, h = 0;

  bool valid() const {
    return x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= 1.0 + 1e-12 && y + h <= 1.0 + 1e-12;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct SgNode {
  std::string id;
  std::string category;
  std::vector<std::string> attributes;
  std::optional<BoundingBox> bbox;

  friend bool operator==(const SgNode&, const SgNode&) = default;
};

struct SgEdge {
  std::string subject;
  std::string predicate;
  std::string object;

  friend bool operator==(const SgEdge&, const SgEdge&) = default;
};

struct SceneGraph {
  std::vector<SgNode> nodes;
  std::vector<SgEdge> edges;

  int node_index(const std::string& id) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].id == id) return int(i);
    return -1;
  }

  friend bool operator==(const SceneGraph&, const SceneGraph&) = default;
};

struct Triple {
  int subject;
  int edge;
  int object;

  friend bool operator==(const Triple&, const Triple&) = default;
};

// Category / predicate / attribute vocabularies, loaded from a dataset
// manifest rather than hard-coded.
struct Vocabulary {
  std::vector<std::string> categories;
  std::vector<std::string> predicates;
  std::vector<std::string> attributes;

  int category_index(const std::string& s) const { return find(categories, s); }
  int predicate_index(const std::string& s) const { return find(predicates, s); }
  int attribute_index(const std::string& s) const { return find(attributes, s); }

private:
  static int find(const std::vector<std::string>& v, const std::string& s) {
    auto it = std::find(v.begin(), v.end(), s);
    return it == v.end() ? -1 : int(it - v.begin());
  }
};

namespace sg_detail {

inline void reject_unknown_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                                const char* where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok |= (it.key() == k);
    if (!ok) fail(errc::parse, std::string("scene graph: unknown key \"") + it.key() + "\" in " + where);
  }
}

inline int line_of_byte(const std::string& text, std::size_t byte) {
  int line = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

} // namespace sg_detail

inline void validate_scene_graph(const SceneGraph& g, const Vocabulary& vocab) {
  if (g.nodes.empty()) fail(errc::constraint, "scene graph: needs at least one node");
  if (int(g.nodes.size()) > kNMax)
    fail(errc::constraint, "scene graph: " + std::to_string(g.nodes.size()) + " nodes exceeds cap of " +
                               std::to_string(kNMax));
  std::unordered_map<std::string, int> seen;
  for (const auto& n : g.nodes) {
    if (n.id.empty()) fail(errc::constraint, "scene graph: empty node id");
    if (!seen.emplace(n.id, 1).second) fail(errc::constraint, "scene graph: duplicate node id \"" + n.id + "\"");
    if (vocab.category_index(n.category) < 0)
      fail(errc::vocab, "scene graph: unknown category \"" + n.category + "\"");
    if (n.bbox && !n.bbox->valid())
      fail(errc::constraint, "scene graph: invalid bbox on node \"" + n.id + "\"");
  }
  for (const auto& e : g.edges) {
    if (vocab.predicate_index(e.predicate) < 0)
      fail(errc::vocab, "scene graph: unknown predicate \"" + e.predicate + "\"");
    if (!seen.count(e.subject))
      fail(errc::reference, "scene graph: edge subject \"" + e.subject + "\" is not a node");
    if (!seen.count(e.object))
      fail(errc::reference, "scene graph: edge object \"" + e.object + "\" is not a node");
    if (e.subject == e.object)
      fail(errc::constraint, "scene graph: self-loop on node \"" + e.subject + "\"");
  }
}

inline SceneGraph parse_scene_graph(const std::string& text, const Vocabulary& vocab) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(errc::parse, "scene graph: malformed JSON at line " +
                          std::to_string(sg_detail::line_of_byte(text, e.byte)) + ": " + e.what());
  }
  if (!j.is_object()) fail(errc::parse, "scene graph: top level must be an object");
  sg_detail::reject_unknown_keys(j, {"nodes", "edges"}, "top level");
  if (!j.contains("nodes") || !j["nodes"].is_array()) fail(errc::parse, "scene graph: missing \"nodes\" array");

  SceneGraph g;
  for (const auto& jn : j["nodes"]) {
    if (!jn.is_object()) fail(errc::parse, "scene graph: node entries must be objects");
    sg_detail::reject_unknown_keys(jn, {"id", "category", "attributes", "bbox"}, "node");
    SgNode n;
    if (!jn.contains("id") || !jn["id"].is_string()) fail(errc::parse, "scene graph: node missing string id");
    n.id = jn["id"].get<std::string>();
    if (!jn.contains("category") || !jn["category"].is_string())
      fail(errc::parse, "scene graph: node \"" + n.id + "\" missing category");
    n.category = jn["category"].get<std::string>();
    if (jn.contains("attributes")) {
      if (!jn["attributes"].is_array()) fail(errc::parse, "scene graph: attributes must be an array");
      for (const auto& a : jn["attributes"]) {
        if (!a.is_string()) fail(errc::parse, "scene graph: attributes must be strings");
        n.attributes.push_back(a.get<std::string>());
      }
    }
    if (jn.contains("bbox")) {
      const auto& b = jn["bbox"];
      if (!b.is_array() || b.size() != 4) fail(errc::parse, "scene graph: bbox must be [x,y,w,h]");
      n.bbox = BoundingBox{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
    }
    g.nodes.push_back(std::move(n));
  }
  if (j.contains("edges")) {
    if (!j["edges"].is_array()) fail(errc::parse, "scene graph: \"edges\" must be an array");
    for (const auto& je : j["edges"]) {
      if (!je.is_object()) fail(errc::parse, "scene graph: edge entries must be objects");
      sg_detail::reject_unknown_keys(je, {"subject", "predicate", "object"}, "edge");
      for (const char* k : {"subject", "predicate", "object"})
        if (!je.contains(k) || !je[k].is_string())
          fail(errc::parse, std::string("scene graph: edge missing string \"") + k + "\"");
      g.edges.push_back(SgEdge{je["subject"].get<std::string>(), je["predicate"].get<std::string>(),
                               je["object"].get<std::string>()});
    }
  }
  validate_scene_graph(g, vocab);
  return g;
}

inline std::string serialize_scene_graph(const SceneGraph& g) {
  nlohmann::ordered_json j;
  j["nodes"] = nlohmann::ordered_json::array();
  for (const auto& n : g.nodes) {
    nlohmann::ordered_json jn;
    jn["id"] = n.id;
    jn["category"] = n.category;
    if (!n.attributes.empty()) jn["attributes"] = n.attributes;
    if (n.bbox) jn["bbox"] = {n.bbox->x, n.bbox->y, n.bbox->w, n.bbox->h};
    j["nodes"].push_back(std::move(jn));
  }
  j["edges"] = nlohmann::ordered_json::array();
  for (const auto& e : g.edges)
    j["edges"].push_back({{"subject", e.subject}, {"predicate", e.predicate}, {"object", e.object}});
  return j.dump(2) + "\n";
}

inline std::uint64_t scene_hash(const SceneGraph& g) { return Rng::hash(serialize_scene_graph(g)); }

inline std::vector<Triple> to_triples(const SceneGraph& g) {
  std::vector<Triple> out;
  out.reserve(g.edges.size());
  for (std::size_t e = 0; e < g.edges.size(); ++e)
    out.push_back(Triple{g.node_index(g.edges[e].subject), int(e), g.node_index(g.edges[e].object)});
  return out;
}

// -----------------------------------------------------------------------------
// graph edits

struct AddNode {
  std::string category;
  // each entry adds one edge with the new node as subject
  std::vector<std::pair<std::string, std::string>> edges; // (predicate, existing node id)
  std::string id;                                         // autogenerated when empty
};

struct SetAttribute {
  std::string id;
  std::string attribute;
};

struct RemoveAttribute {
  std::string id;
  std::string attribute;
};

using Edit = std::variant<AddNode, SetAttribute, RemoveAttribute>;

namespace sg_detail {

inline std::string fresh_node_id(const SceneGraph& g) {
  for (int k = 0;; ++k) {
    std::string id = "n" + std::to_string(k);
    if (g.node_index(id) < 0) return id;
  }
}

} // namespace sg_detail

// Returns an edited copy; the input graph is never touched and untouched
// nodes/edges keep their order.
inline SceneGraph apply_edit(const SceneGraph& g, const Edit& edit, const Vocabulary& vocab) {
  SceneGraph out = g;
  if (const auto* add = std::get_if<AddNode>(&edit)) {
    SgNode n;
    n.id = add->id.empty() ? sg_detail::fresh_node_id(g) : add->id;
    n.category = add->category;
    out.nodes.push_back(n);
    for (const auto& [pred, target] : add->edges)
      out.edges.push_back(SgEdge{n.id, pred, target});
  } else if (const auto* set = std::get_if<SetAttribute>(&edit)) {
    int i = out.node_index(set->id);
    if (i < 0) fail(errc::reference, "edit: no node \"" + set->id + "\"");
    out.nodes[std::size_t(i)].attributes = {set->attribute};
  } else if (const auto* rem = std::get_if<RemoveAttribute>(&edit)) {
    int i = out.node_index(rem->id);
    if (i < 0) fail(errc::reference, "edit: no node \"" + rem->id + "\"");
    auto& attrs = out.nodes[std::size_t(i)].attributes;
    auto it = std::find(attrs.begin(), attrs.end(), rem->attribute);
    if (it == attrs.end())
      fail(errc::constraint, "edit: node \"" + rem->id + "\" has no attribute \"" + rem->attribute + "\"");
    attrs.erase(it);
  }
  validate_scene_graph(out, vocab);
  return out;
}

// -----------------------------------------------------------------------------
// dataset manifest

inline Vocabulary vocabulary_from_json(const nlohmann::json& j) {
  Vocabulary v;
  for (const auto& s : j.at("categories")) v.categories.push_back(s.get<std::string>());
  for (const auto& s : j.at("predicates")) v.predicates.push_back(s.get<std::string>());
  for (const auto& s : j.at("attributes")) v.attributes.push_back(s.get<std::string>());
  return v;
}

inline nlohmann::json vocabulary_to_json(const Vocabulary& v) {
  return {{"categories", v.categories}, {"predicates", v.predicates}, {"attributes", v.attributes}};
}

} // namespace disco
