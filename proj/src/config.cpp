// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0

#include "minitune/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <regex>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace minitune::config {

// ---------------------------------------------------------------- ConfigNode

ConfigNode ConfigNode::scalar(std::string text, bool quoted) {
  ConfigNode n;
  n.kind_ = Kind::kScalar;
  n.text_ = std::move(text);
  n.quoted_ = quoted;
  return n;
}

ConfigNode ConfigNode::list(std::vector<ConfigNode> items) {
  ConfigNode n;
  n.kind_ = Kind::kList;
  n.items_ = std::move(items);
  return n;
}

ConfigNode ConfigNode::map(std::vector<Entry> entries) {
  ConfigNode n;
  n.kind_ = Kind::kMap;
  n.entries_ = std::move(entries);
  return n;
}

namespace {

std::string describe(const ConfigNode& n) {
  switch (n.kind()) {
    case ConfigNode::Kind::kNull:
      return "null";
    case ConfigNode::Kind::kList:
      return "a list";
    case ConfigNode::Kind::kMap:
      return "a map";
    default:
      return "'" + n.text() + "'";
  }
}

bool parse_int(const std::string& s, std::int64_t& out) {
  static const std::regex re("[-+]?[0-9]+");
  if (!std::regex_match(s, re)) return false;
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno == ERANGE) return false;
  out = v;
  return true;
}

bool parse_double(const std::string& s, double& out) {
  static const std::regex re("[-+]?([0-9]+\\.?[0-9]*|\\.[0-9]+)([eE][-+]?[0-9]+)?");
  if (std::regex_match(s, re)) {
    out = std::strtod(s.c_str(), nullptr);
    return true;
  }
  if (s == ".inf" || s == "+.inf") {
    out = std::numeric_limits<double>::infinity();
    return true;
  }
  if (s == "-.inf") {
    out = -std::numeric_limits<double>::infinity();
    return true;
  }
  return false;
}

}  // namespace

bool ConfigNode::is_bool() const {
  if (!is_scalar() || quoted_) return false;
  static const std::set<std::string> words = {"true", "True", "TRUE", "false", "False", "FALSE"};
  return words.count(text_) > 0;
}

bool ConfigNode::is_int() const {
  std::int64_t v;
  return is_scalar() && !quoted_ && parse_int(text_, v);
}

bool ConfigNode::is_number() const {
  double v;
  return is_scalar() && !quoted_ && parse_double(text_, v);
}

bool ConfigNode::as_bool() const {
  if (!is_bool()) throw ConfigError("expected a boolean, got " + describe(*this));
  return text_[0] == 't' || text_[0] == 'T';
}

std::int64_t ConfigNode::as_int() const {
  std::int64_t v = 0;
  if (!is_scalar() || quoted_ || !parse_int(text_, v)) throw ConfigError("expected an integer, got " + describe(*this));
  return v;
}

double ConfigNode::as_double() const {
  double v = 0;
  if (!is_scalar() || quoted_ || !parse_double(text_, v)) throw ConfigError("expected a number, got " + describe(*this));
  return v;
}

std::string ConfigNode::as_string() const {
  if (!is_scalar()) throw ConfigError("expected a scalar, got " + describe(*this));
  return text_;
}

bool ConfigNode::has(const std::string& key) const { return find(key) != nullptr; }

const ConfigNode* ConfigNode::find(const std::string& key) const {
  if (!is_map()) return nullptr;
  for (const auto& [k, v] : entries_) {
    if (k == key) return &v;
  }
  return nullptr;
}

const ConfigNode& ConfigNode::at(const std::string& key) const {
  const ConfigNode* n = find(key);
  if (!n) throw ConfigError("missing key '" + key + "'");
  return *n;
}

ConfigNode& ConfigNode::at(const std::string& key) {
  return const_cast<ConfigNode&>(static_cast<const ConfigNode&>(*this).at(key));
}

void ConfigNode::set(const std::string& key, ConfigNode value) {
  if (kind_ == Kind::kNull) kind_ = Kind::kMap;
  if (!is_map()) throw ConfigError("cannot set key '" + key + "' on " + describe(*this));
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries_.emplace_back(key, std::move(value));
}

void ConfigNode::erase(const std::string& key) {
  entries_.erase(std::remove_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.first == key; }),
                 entries_.end());
}

const ConfigNode* ConfigNode::find_path(const std::string& dotted) const {
  const ConfigNode* cur = this;
  std::size_t start = 0;
  while (cur) {
    const auto dot = dotted.find('.', start);
    cur = cur->find(dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
    if (dot == std::string::npos) return cur;
    start = dot + 1;
  }
  return nullptr;
}

bool ConfigNode::operator==(const ConfigNode& o) const {
  if (kind_ != o.kind_) return false;
  switch (kind_) {
    case Kind::kNull:
      return true;
    case Kind::kScalar:
      return text_ == o.text_ && quoted_ == o.quoted_;
    case Kind::kList:
      return items_ == o.items_;
    case Kind::kMap:
      return entries_ == o.entries_;
  }
  return false;
}

// ------------------------------------------------------------------- parsing

namespace {

std::string where(const YAML::Mark& mark) {
  if (mark.is_null()) return "";
  return "line " + std::to_string(mark.line + 1) + ", column " + std::to_string(mark.column + 1) + ": ";
}

ConfigNode convert(const YAML::Node& y) {
  switch (y.Type()) {
    case YAML::NodeType::Undefined:
    case YAML::NodeType::Null:
      return ConfigNode::null();
    case YAML::NodeType::Scalar:
      return ConfigNode::scalar(y.Scalar(), y.Tag() == "!");
    case YAML::NodeType::Sequence: {
      std::vector<ConfigNode> items;
      for (const auto& item : y) items.push_back(convert(item));
      return ConfigNode::list(std::move(items));
    }
    case YAML::NodeType::Map: {
      std::vector<ConfigNode::Entry> entries;
      std::set<std::string> seen;
      for (auto it = y.begin(); it != y.end(); ++it) {
        if (!it->first.IsScalar()) throw ConfigError(where(it->first.Mark()) + "map keys must be scalars");
        const std::string key = it->first.Scalar();
        if (!seen.insert(key).second) throw ConfigError(where(it->first.Mark()) + "duplicate key '" + key + "'");
        entries.emplace_back(key, convert(it->second));
      }
      return ConfigNode::map(std::move(entries));
    }
  }
  return ConfigNode::null();
}

YAML::Node load_yaml(const std::string& text) {
  try {
    return YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError("YAML parse error at " + where(e.mark) + e.msg);
  }
}

}  // namespace

ConfigNode parse_config_raw(const std::string& yaml) {
  ConfigNode root = convert(load_yaml(yaml));
  if (root.is_null()) return ConfigNode::map();
  if (!root.is_map()) throw ConfigError("config root must be a map, got " + describe(root));
  return root;
}

ConfigNode parse_config(const std::string& yaml) { return resolve_interpolations(parse_config_raw(yaml)); }

ConfigNode load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config_raw(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ------------------------------------------------------------- interpolation

namespace {

class Resolver {
 public:
  explicit Resolver(const ConfigNode& root) : root_(root) {}

  ConfigNode resolve(const ConfigNode& node) {
    switch (node.kind()) {
      case ConfigNode::Kind::kScalar:
        return resolve_scalar(node);
      case ConfigNode::Kind::kList: {
        std::vector<ConfigNode> items;
        for (const auto& i : node.items()) items.push_back(resolve(i));
        return ConfigNode::list(std::move(items));
      }
      case ConfigNode::Kind::kMap: {
        std::vector<ConfigNode::Entry> entries;
        for (const auto& [k, v] : node.entries()) entries.emplace_back(k, resolve(v));
        return ConfigNode::map(std::move(entries));
      }
      default:
        return node;
    }
  }

 private:
  ConfigNode lookup(const std::string& path) {
    if (std::find(stack_.begin(), stack_.end(), path) != stack_.end()) {
      std::string chain;
      for (const auto& s : stack_) chain += s + " -> ";
      throw ConfigError("cyclic interpolation: " + chain + path);
    }
    const ConfigNode* target = root_.find_path(path);
    if (!target) throw ConfigError("unresolved interpolation ${" + path + "}");
    stack_.push_back(path);
    ConfigNode out = resolve(*target);
    stack_.pop_back();
    return out;
  }

  ConfigNode resolve_scalar(const ConfigNode& node) {
    static const std::regex ref("\\$\\{([^}]*)\\}");
    const std::string& text = node.text();
    std::smatch m;
    if (!std::regex_search(text, m, ref)) return node;
    if (m.position(0) == 0 && static_cast<std::size_t>(m.length(0)) == text.size()) return lookup(m[1].str());
    std::string out;
    auto begin = text.cbegin();
    while (std::regex_search(begin, text.cend(), m, ref)) {
      out.append(begin, begin + m.position(0));
      ConfigNode v = lookup(m[1].str());
      if (v.is_map() || v.is_list()) {
        throw ConfigError("interpolation ${" + m[1].str() + "} inside '" + text + "' refers to a collection");
      }
      out += v.is_null() ? "null" : v.text();
      begin += m.position(0) + m.length(0);
    }
    out.append(begin, text.cend());
    return ConfigNode::scalar(out, true);
  }

  const ConfigNode& root_;
  std::vector<std::string> stack_;
};

}  // namespace

ConfigNode resolve_interpolations(const ConfigNode& root) { return Resolver(root).resolve(root); }

// ----------------------------------------------------------------- overrides

ConfigNode apply_overrides(ConfigNode root, const std::vector<std::string>& overrides) {
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + ov + "' is not of the form key=value");
    const std::string path = ov.substr(0, eq);
    ConfigNode value = convert(load_yaml(ov.substr(eq + 1)));
    ConfigNode* cur = &root;
    std::size_t start = 0;
    for (;;) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (key.empty()) throw ConfigError("override '" + ov + "' has an empty path segment");
      if (cur->is_null()) *cur = ConfigNode::map();
      if (!cur->is_map()) {
        throw ConfigError("override '" + ov + "': '" + path.substr(0, start - 1) + "' is " + describe(*cur) +
                          ", not a map");
      }
      if (dot == std::string::npos) {
        cur->set(key, std::move(value));
        break;
      }
      if (!cur->has(key)) cur->set(key, ConfigNode::map());
      cur = &cur->at(key);
      start = dot + 1;
    }
  }
  return root;
}

// ------------------------------------------------------------- serialization

namespace {

void emit(YAML::Emitter& out, const ConfigNode& n) {
  switch (n.kind()) {
    case ConfigNode::Kind::kNull:
      out << YAML::Null;
      break;
    case ConfigNode::Kind::kScalar:
      if (n.quoted()) {
        out << YAML::DoubleQuoted << n.text();
      } else {
        out << n.text();
      }
      break;
    case ConfigNode::Kind::kList:
      if (n.items().empty()) out << YAML::Flow;
      out << YAML::BeginSeq;
      for (const auto& i : n.items()) emit(out, i);
      out << YAML::EndSeq;
      break;
    case ConfigNode::Kind::kMap:
      if (n.entries().empty()) out << YAML::Flow;
      out << YAML::BeginMap;
      for (const auto& [k, v] : n.entries()) {
        out << YAML::Key << k << YAML::Value;
        emit(out, v);
      }
      out << YAML::EndMap;
      break;
  }
}

}  // namespace

std::string serialize(const ConfigNode& root) {
  YAML::Emitter out;
  emit(out, root);
  if (!out.good()) throw ConfigError("cannot serialize config: " + out.GetLastError());
  return std::string(out.c_str()) + "\n";
}

// ------------------------------------------------------------------ registry

ComponentArgs::ComponentArgs(std::string component, std::map<std::string, std::any> values)
    : component_(std::move(component)), values_(std::move(values)) {}

bool ComponentArgs::has(const std::string& name) const { return values_.count(name) > 0; }

bool ComponentArgs::given(const std::string& name) const {
  if (!has(name)) return false;
  const auto* n = std::any_cast<ConfigNode>(&values_.at(name));
  return !n || !n->is_null();
}

void ComponentArgs::fail(const std::string& name, const std::string& what) const {
  throw ConfigError("component '" + component_ + "', argument '" + name + "': " + what);
}

const std::any& ComponentArgs::raw(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) fail(name, "not provided");
  return it->second;
}

const ConfigNode& ComponentArgs::node(const std::string& name) const {
  const auto* n = std::any_cast<ConfigNode>(&raw(name));
  if (!n) fail(name, "expected a plain value, got a component");
  return *n;
}

namespace {
template <typename F>
auto typed(const ComponentArgs& args, const std::string& name, F get) {
  try {
    return get(args.node(name));
  } catch (const ConfigError& e) {
    if (std::string(e.what()).rfind("component '", 0) == 0) throw;
    throw ConfigError("component '" + args.component() + "', argument '" + name + "': " + e.what());
  }
}
}  // namespace

std::string ComponentArgs::get_string(const std::string& name) const {
  return typed(*this, name, [](const ConfigNode& n) { return n.as_string(); });
}
std::string ComponentArgs::get_string(const std::string& name, const std::string& fallback) const {
  return given(name) ? get_string(name) : fallback;
}
std::int64_t ComponentArgs::get_int(const std::string& name) const {
  return typed(*this, name, [](const ConfigNode& n) { return n.as_int(); });
}
std::int64_t ComponentArgs::get_int(const std::string& name, std::int64_t fallback) const {
  return given(name) ? get_int(name) : fallback;
}
double ComponentArgs::get_double(const std::string& name) const {
  return typed(*this, name, [](const ConfigNode& n) { return n.as_double(); });
}
double ComponentArgs::get_double(const std::string& name, double fallback) const {
  return given(name) ? get_double(name) : fallback;
}
bool ComponentArgs::get_bool(const std::string& name) const {
  return typed(*this, name, [](const ConfigNode& n) { return n.as_bool(); });
}
bool ComponentArgs::get_bool(const std::string& name, bool fallback) const {
  return given(name) ? get_bool(name) : fallback;
}
std::vector<std::string> ComponentArgs::get_strings(const std::string& name) const {
  return typed(*this, name, [](const ConfigNode& n) {
    if (!n.is_list()) throw ConfigError("expected a list, got " + describe(n));
    std::vector<std::string> out;
    for (const auto& i : n.items()) out.push_back(i.as_string());
    return out;
  });
}

void ComponentRegistry::add(ComponentSpec spec) {
  if (spec.path.empty()) throw std::invalid_argument("component path must not be empty");
  if (specs_.count(spec.path)) throw std::invalid_argument("component '" + spec.path + "' is already registered");
  const std::string path = spec.path;
  specs_.emplace(path, std::move(spec));
}

void ComponentRegistry::alias(const std::string& alias, const std::string& target) {
  const ComponentSpec* t = find(target);
  if (!t) throw std::invalid_argument("cannot alias unknown component '" + target + "'");
  ComponentSpec copy = *t;
  copy.path = alias;
  add(std::move(copy));
}

const ComponentSpec* ComponentRegistry::find(const std::string& path) const {
  auto it = specs_.find(path);
  return it == specs_.end() ? nullptr : &it->second;
}

std::vector<std::string> ComponentRegistry::paths() const {
  std::vector<std::string> out;
  for (const auto& [p, s] : specs_) out.push_back(p);
  return out;
}

namespace {
std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}
}  // namespace

std::vector<std::string> ComponentRegistry::nearest(const std::string& path, std::size_t n) const {
  std::vector<std::pair<std::size_t, std::string>> scored;
  for (const auto& [p, s] : specs_) scored.emplace_back(edit_distance(path, p), p);
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < scored.size() && i < n; ++i) out.push_back(scored[i].second);
  return out;
}

std::any instantiate(const ConfigNode& node, const ComponentRegistry& registry,
                     const std::map<std::string, std::any>& extra) {
  if (!node.is_component()) {
    if (!extra.empty()) throw ConfigError("extra arguments given for a node without _component_");
    return node;
  }
  const std::string path = node.component();
  const ComponentSpec* spec = registry.find(path);
  if (!spec) {
    std::string near;
    for (const auto& p : registry.nearest(path)) near += (near.empty() ? "" : ", ") + p;
    throw ConfigError("unknown component '" + path + "'; nearest registered: " + near);
  }
  auto accepted = [&](const std::string& name) {
    return std::find(spec->required.begin(), spec->required.end(), name) != spec->required.end() ||
           std::find(spec->optional.begin(), spec->optional.end(), name) != spec->optional.end();
  };
  auto reject = [&](const std::string& name) {
    std::string list;
    for (const auto& a : spec->required) list += (list.empty() ? "" : ", ") + a;
    for (const auto& a : spec->optional) list += (list.empty() ? "" : ", ") + a;
    throw ConfigError("component '" + path + "' does not accept argument '" + name + "' (accepted: " + list + ")");
  };
  std::map<std::string, std::any> values;
  for (const auto& [key, child] : node.entries()) {
    if (key == "_component_") continue;
    if (!accepted(key)) reject(key);
    values[key] = child.is_component() ? instantiate(child, registry) : std::any(child);
  }
  for (const auto& [key, v] : extra) {
    if (!accepted(key)) reject(key);
    if (values.count(key)) throw ConfigError("component '" + path + "': argument '" + key + "' is set by the recipe");
    values[key] = v;
  }
  for (const auto& r : spec->required) {
    if (!values.count(r)) throw ConfigError("component '" + path + "' is missing required argument '" + r + "'");
  }
  return spec->build(ComponentArgs(path, std::move(values)));
}

}  // namespace minitune::config
