// SPDX-FileCopyrightText: Copyright (c) 2026 The minitune Authors
// SPDX-License-Identifier: Apache-2.0
//
// YAML component-graph configs: a small ordered tree, `${key}` interpolation,
// `dotted.path=value` overrides and a registry of instantiable components.

#pragma once

#include <any>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace minitune::config {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigNode {
 public:
  enum class Kind { kNull, kScalar, kList, kMap };
  using Entry = std::pair<std::string, ConfigNode>;

  ConfigNode() = default;
  static ConfigNode null() { return {}; }
  /// Plain scalars are typed on access (bool, int, float, string); quoted
  /// scalars are always strings.
  static ConfigNode scalar(std::string text, bool quoted = false);
  static ConfigNode list(std::vector<ConfigNode> items = {});
  static ConfigNode map(std::vector<Entry> entries = {});

  Kind kind() const { return kind_; }
  bool is_null() const { return kind_ == Kind::kNull; }
  bool is_scalar() const { return kind_ == Kind::kScalar; }
  bool is_list() const { return kind_ == Kind::kList; }
  bool is_map() const { return kind_ == Kind::kMap; }

  const std::string& text() const { return text_; }
  bool quoted() const { return quoted_; }
  bool is_bool() const;
  bool is_int() const;
  bool is_number() const;
  bool as_bool() const;
  std::int64_t as_int() const;
  double as_double() const;
  /// Scalar text; throws on lists and maps.
  std::string as_string() const;

  const std::vector<ConfigNode>& items() const { return items_; }
  std::vector<ConfigNode>& items() { return items_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  bool has(const std::string& key) const;
  /// Throws ConfigError naming the key when absent.
  const ConfigNode& at(const std::string& key) const;
  ConfigNode& at(const std::string& key);
  const ConfigNode* find(const std::string& key) const;
  /// Inserts or replaces, keeping the original position on replace.
  void set(const std::string& key, ConfigNode value);
  void erase(const std::string& key);

  /// Dotted lookup ("optimizer.lr"); null when any segment is missing.
  const ConfigNode* find_path(const std::string& dotted) const;

  bool is_component() const { return is_map() && has("_component_"); }
  std::string component() const { return at("_component_").as_string(); }

  bool operator==(const ConfigNode& other) const;

 private:
  Kind kind_ = Kind::kNull;
  std::string text_;
  bool quoted_ = false;
  std::vector<ConfigNode> items_;
  std::vector<Entry> entries_;
};

/// Parses without resolving interpolation. Duplicate keys and syntax errors
/// throw ConfigError with a line:column location.
ConfigNode parse_config_raw(const std::string& yaml);
/// Parses and resolves `${...}` references.
ConfigNode parse_config(const std::string& yaml);
/// Unresolved, so command-line overrides can be applied before references
/// are substituted.
ConfigNode load_config_file(const std::filesystem::path& path);

/// A scalar that is exactly "${path}" takes the referenced node (any kind);
/// references embedded in longer text are substituted as scalar text.
/// Paths are dotted from the root.
ConfigNode resolve_interpolations(const ConfigNode& root);

/// Applies "dotted.path=value" overrides in order; values are parsed as YAML
/// scalars or flow collections.
ConfigNode apply_overrides(ConfigNode root, const std::vector<std::string>& overrides);

/// Block-style YAML that parse_config_raw maps back to an equal tree.
std::string serialize(const ConfigNode& root);

/// Component arguments after depth-first instantiation: nested components
/// hold their built object, everything else the plain node.
class ComponentArgs {
 public:
  ComponentArgs(std::string component, std::map<std::string, std::any> values);

  const std::string& component() const { return component_; }
  bool has(const std::string& name) const;
  /// Present and not YAML null.
  bool given(const std::string& name) const;
  const ConfigNode& node(const std::string& name) const;

  std::string get_string(const std::string& name) const;
  std::string get_string(const std::string& name, const std::string& fallback) const;
  std::int64_t get_int(const std::string& name) const;
  std::int64_t get_int(const std::string& name, std::int64_t fallback) const;
  double get_double(const std::string& name) const;
  double get_double(const std::string& name, double fallback) const;
  bool get_bool(const std::string& name) const;
  bool get_bool(const std::string& name, bool fallback) const;
  std::vector<std::string> get_strings(const std::string& name) const;

  template <typename T>
  T object(const std::string& name) const {
    const std::any& v = raw(name);
    if (const T* p = std::any_cast<T>(&v)) return *p;
    throw ConfigError(component_ + ": argument '" + name + "' has the wrong type");
  }
  const std::any& raw(const std::string& name) const;

 private:
  [[noreturn]] void fail(const std::string& name, const std::string& what) const;
  std::string component_;
  std::map<std::string, std::any> values_;
};

struct ComponentSpec {
  std::string path;
  std::vector<std::string> required;
  std::vector<std::string> optional;
  std::function<std::any(const ComponentArgs&)> build;
};

class ComponentRegistry {
 public:
  /// Throws when the path is already registered.
  void add(ComponentSpec spec);
  /// Registers `alias` as another path for `target`.
  void alias(const std::string& alias, const std::string& target);
  const ComponentSpec* find(const std::string& path) const;
  std::vector<std::string> paths() const;
  /// Up to `n` registered paths closest to `path` by edit distance.
  std::vector<std::string> nearest(const std::string& path, std::size_t n = 3) const;

 private:
  std::map<std::string, ComponentSpec> specs_;
};

/// Nodes without "_component_" come back as the ConfigNode itself. Children
/// are built before their parent; `extra` supplies arguments that are not in
/// the config (for example parameters to optimize).
std::any instantiate(const ConfigNode& node, const ComponentRegistry& registry,
                     const std::map<std::string, std::any>& extra = {});

}  // namespace minitune::config
