#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gefs/error.hpp"
#include "gefs/random.hpp"

namespace gefs {

using Label = std::uint32_t;

/// Value stored for an unobserved cell. Only inference-time tables may hold it.
inline constexpr double missing_value = std::numeric_limits<double>::quiet_NaN();

inline bool is_missing(double v) noexcept { return std::isnan(v); }

enum class ColumnKind { continuous, categorical };

struct Column {
    std::string name;
    ColumnKind kind = ColumnKind::continuous;
    /// Number of categories; 0 for continuous columns.
    std::size_t cardinality = 0;
    /// Category labels as they appear in the data, indexed by code.
    std::vector<std::string> labels;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::optional<double> parse_number(std::string_view s) {
    s = trim(s);
    if (s.empty()) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return value;
}

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline bool is_missing_token(std::string_view s) {
    s = trim(s);
    return s.empty() || s == "?";
}

}  // namespace detail

/// Column layout of a table: ordered columns plus the index of the class column.
///
/// Features are the non-target columns in file order; feature index j skips
/// the target column.
class Schema {
public:
    Schema(std::vector<Column> columns, std::size_t target_index)
        : columns_(std::move(columns)), target_index_(target_index) {
        if (target_index_ >= columns_.size()) throw DataError("schema: target index out of range");
        const Column& target = columns_[target_index_];
        if (target.kind != ColumnKind::categorical) throw DataError("schema: target column '" + target.name + "' must be categorical");
        if (target.cardinality < 2) throw DataError("schema: target column '" + target.name + "' needs at least 2 classes");
        std::set<std::string> names;
        std::size_t offset = 0;
        for (std::size_t c = 0; c < columns_.size(); ++c) {
            Column& col = columns_[c];
            if (!names.insert(col.name).second) throw DataError("schema: duplicate column name '" + col.name + "'");
            if (col.kind == ColumnKind::categorical) {
                if (col.cardinality == 0) throw DataError("schema: categorical column '" + col.name + "' has cardinality 0");
                if (col.labels.empty()) {
                    for (std::size_t k = 0; k < col.cardinality; ++k) col.labels.push_back(std::to_string(k));
                }
                if (col.labels.size() != col.cardinality) throw DataError("schema: label count mismatch in column '" + col.name + "'");
            } else {
                col.cardinality = 0;
                col.labels.clear();
            }
            std::unordered_map<std::string, Label> lookup;
            for (std::size_t k = 0; k < col.labels.size(); ++k) lookup.emplace(col.labels[k], static_cast<Label>(k));
            lookups_.push_back(std::move(lookup));
            if (c == target_index_) continue;
            feature_columns_.push_back(c);
            category_offsets_.push_back(offset);
            if (col.kind == ColumnKind::categorical) offset += col.cardinality;
        }
        total_categories_ = offset;
    }

    const std::vector<Column>& columns() const noexcept { return columns_; }
    std::size_t target_index() const noexcept { return target_index_; }
    const Column& target() const noexcept { return columns_[target_index_]; }
    std::size_t class_count() const noexcept { return target().cardinality; }

    /// Number of explanatory variables m.
    std::size_t feature_count() const noexcept { return feature_columns_.size(); }
    const Column& feature(std::size_t j) const { return columns_[feature_columns_.at(j)]; }
    std::size_t column_of_feature(std::size_t j) const { return feature_columns_.at(j); }
    bool is_categorical(std::size_t j) const { return feature(j).kind == ColumnKind::categorical; }

    /// Position of feature j's categories in a flat pool of all categorical probabilities.
    std::size_t category_offset(std::size_t j) const { return category_offsets_.at(j); }
    std::size_t total_categories() const noexcept { return total_categories_; }

    std::optional<std::size_t> find_column(std::string_view name) const {
        for (std::size_t c = 0; c < columns_.size(); ++c)
            if (columns_[c].name == name) return c;
        return std::nullopt;
    }

    /// Code of a category cell in column c. Exact label match first, then numeric equality.
    std::optional<Label> code_of(std::size_t c, std::string_view cell) const {
        cell = detail::trim(cell);
        const auto& lookup = lookups_.at(c);
        if (auto it = lookup.find(std::string(cell)); it != lookup.end()) return it->second;
        if (auto v = detail::parse_number(cell)) {
            const auto& labels = columns_[c].labels;
            for (std::size_t k = 0; k < labels.size(); ++k) {
                auto lv = detail::parse_number(labels[k]);
                if (lv && *lv == *v) return static_cast<Label>(k);
            }
        }
        return std::nullopt;
    }

    bool operator==(const Schema& other) const {
        if (target_index_ != other.target_index_ || columns_.size() != other.columns_.size()) return false;
        for (std::size_t c = 0; c < columns_.size(); ++c) {
            const Column& a = columns_[c];
            const Column& b = other.columns_[c];
            if (a.name != b.name || a.kind != b.kind || a.cardinality != b.cardinality || a.labels != b.labels) return false;
        }
        return true;
    }

private:
    std::vector<Column> columns_;
    std::size_t target_index_;
    std::vector<std::size_t> feature_columns_;
    std::vector<std::size_t> category_offsets_;
    std::size_t total_categories_ = 0;
    std::vector<std::unordered_map<std::string, Label>> lookups_;
};

using SchemaPtr = std::shared_ptr<const Schema>;

/// Immutable typed table: n rows of m feature values (row-major) and optional class labels.
///
/// Categorical feature cells hold their integer code as a double. Missing cells
/// are NaN.
class DataTable {
public:
    DataTable(SchemaPtr schema, std::vector<double> features, std::vector<Label> labels)
        : schema_(std::move(schema)), features_(std::move(features)), labels_(std::move(labels)) {
        if (!schema_) throw DataError("table: null schema");
        const std::size_t m = schema_->feature_count();
        if (m == 0) {
            rows_ = labels_.size();
            if (!features_.empty()) throw DataError("table: feature data for a schema without features");
        } else {
            if (features_.size() % m != 0) throw DataError("table: ragged feature matrix");
            rows_ = features_.size() / m;
        }
        if (!labels_.empty() && labels_.size() != rows_) throw DataError("table: label count differs from row count");
        for (std::size_t i = 0; i < rows_; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                const double v = features_[i * m + j];
                if (is_missing(v)) {
                    has_missing_ = true;
                    continue;
                }
                if (!std::isfinite(v)) throw DataError("table: non-finite value in row " + std::to_string(i));
                if (schema_->is_categorical(j)) {
                    if (v < 0 || v != std::floor(v) || v >= static_cast<double>(schema_->feature(j).cardinality))
                        throw DataError("table: category code out of range in column '" + schema_->feature(j).name + "'");
                }
            }
        }
        for (Label y : labels_)
            if (y >= schema_->class_count()) throw DataError("table: class label out of range");
    }

    const Schema& schema() const noexcept { return *schema_; }
    const SchemaPtr& schema_ptr() const noexcept { return schema_; }
    std::size_t rows() const noexcept { return rows_; }
    std::size_t feature_count() const noexcept { return schema_->feature_count(); }
    bool has_labels() const noexcept { return rows_ == 0 || !labels_.empty(); }
    bool has_missing() const noexcept { return has_missing_; }

    std::span<const double> row(std::size_t i) const {
        const std::size_t m = feature_count();
        return std::span<const double>(features_).subspan(i * m, m);
    }
    double value(std::size_t i, std::size_t j) const { return features_[i * feature_count() + j]; }
    Label label(std::size_t i) const { return labels_.at(i); }
    const std::vector<Label>& labels() const noexcept { return labels_; }
    const std::vector<double>& feature_data() const noexcept { return features_; }

    /// Table of the given rows in the given order (duplicates allowed).
    DataTable subset(std::span<const std::size_t> indices) const {
        const std::size_t m = feature_count();
        std::vector<double> f;
        f.reserve(indices.size() * m);
        std::vector<Label> l;
        if (!labels_.empty()) l.reserve(indices.size());
        for (std::size_t i : indices) {
            if (i >= rows_) throw DataError("table: row index out of range");
            auto r = row(i);
            f.insert(f.end(), r.begin(), r.end());
            if (!labels_.empty()) l.push_back(labels_[i]);
        }
        return DataTable(schema_, std::move(f), std::move(l));
    }

private:
    SchemaPtr schema_;
    std::vector<double> features_;
    std::vector<Label> labels_;
    std::size_t rows_ = 0;
    bool has_missing_ = false;
};

// ---------------------------------------------------------------------------
// Sidecar schema description

/// Per-column override read from a sidecar file.
struct ColumnSpec {
    enum class Kind { continuous, categorical, target } kind = Kind::continuous;
    /// Declared cardinality for `categorical:k`; cells must then be codes 0..k-1.
    std::optional<std::size_t> cardinality;
};

/// Column name -> override. Columns not listed are type-inferred.
struct SchemaSpec {
    std::map<std::string, ColumnSpec> columns;
};

/// Parses sidecar text. One `name: kind` entry per line, where kind is
/// `continuous`, `categorical`, `categorical:k` or `target`. `#` starts a comment.
inline SchemaSpec parse_schema_spec(std::string_view text) {
    SchemaSpec spec;
    std::size_t line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const auto eol = text.find('\n');
        std::string_view line = text.substr(0, eol);
        text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto colon = line.find(':');
        if (colon == std::string_view::npos) throw DataError("schema sidecar line " + std::to_string(line_no) + ": expected 'name: kind'");
        const std::string name(detail::trim(line.substr(0, colon)));
        const std::string_view kind = detail::trim(line.substr(colon + 1));
        ColumnSpec cs;
        if (kind == "continuous") {
            cs.kind = ColumnSpec::Kind::continuous;
        } else if (kind == "target") {
            cs.kind = ColumnSpec::Kind::target;
        } else if (kind.starts_with("categorical")) {
            cs.kind = ColumnSpec::Kind::categorical;
            std::string_view rest = detail::trim(kind.substr(std::string_view("categorical").size()));
            if (!rest.empty()) {
                if (rest.front() != ':') throw DataError("schema sidecar line " + std::to_string(line_no) + ": bad kind '" + std::string(kind) + "'");
                rest = detail::trim(rest.substr(1));
                std::size_t k = 0;
                const auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), k);
                if (ec != std::errc{} || ptr != rest.data() + rest.size() || k == 0)
                    throw DataError("schema sidecar line " + std::to_string(line_no) + ": bad cardinality '" + std::string(rest) + "'");
                cs.cardinality = k;
            }
        } else {
            throw DataError("schema sidecar line " + std::to_string(line_no) + ": unknown kind '" + std::string(kind) + "'");
        }
        if (name.empty()) throw DataError("schema sidecar line " + std::to_string(line_no) + ": empty column name");
        spec.columns[name] = cs;
    }
    return spec;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file '" + path + "'");
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline SchemaSpec load_schema_spec(const std::string& path) { return parse_schema_spec(read_file(path)); }

/// FNV-1a 64-bit hash of a byte string, as 16 lowercase hex digits.
inline std::string content_hash(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

inline std::string file_hash(const std::string& path) { return content_hash(read_file(path)); }

// ---------------------------------------------------------------------------
// CSV

namespace detail {

/// Splits CSV text into records of fields. Double-quoted fields may contain
/// commas, doubled quotes and newlines.
inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> record;
    std::string field;
    bool in_quotes = false;
    bool field_started = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(c);
            }
            continue;
        }
        if (c == '"') {
            in_quotes = true;
            field_started = true;
        } else if (c == ',') {
            record.push_back(std::move(field));
            field.clear();
            field_started = true;
        } else if (c == '\n') {
            if (field_started || !field.empty() || !record.empty()) {
                record.push_back(std::move(field));
                records.push_back(std::move(record));
            }
            record.clear();
            field.clear();
            field_started = false;
        } else if (c != '\r') {
            field.push_back(c);
            field_started = true;
        }
    }
    if (in_quotes) throw DataError("csv: unterminated quoted field");
    if (field_started || !field.empty() || !record.empty()) {
        record.push_back(std::move(field));
        records.push_back(std::move(record));
    }
    // Strip a UTF-8 byte order mark from the header.
    if (!records.empty() && !records[0].empty() && records[0][0].starts_with("\xEF\xBB\xBF")) records[0][0].erase(0, 3);
    return records;
}

inline std::vector<std::string> infer_labels(const std::vector<std::string_view>& cells) {
    bool all_numeric = true;
    std::map<double, std::string> numeric;
    std::set<std::string> text;
    for (auto cell : cells) {
        auto t = trim(cell);
        text.emplace(t);
        if (all_numeric) {
            if (auto v = parse_number(t)) numeric.emplace(*v, format_double(*v));
            else all_numeric = false;
        }
    }
    std::vector<std::string> labels;
    if (all_numeric) {
        for (auto& [v, s] : numeric) labels.push_back(s);
    } else {
        labels.assign(text.begin(), text.end());
    }
    return labels;
}

}  // namespace detail

struct LoadOptions {
    std::optional<SchemaSpec> sidecar = std::nullopt;
    /// Class column name; overrides the sidecar and the last-column default.
    std::optional<std::string> target = std::nullopt;
    /// Accept `?` / empty cells as missing features (inference only).
    bool allow_missing = false;
};

/// Integer-valued numeric columns with at most this many distinct values are inferred categorical.
inline constexpr std::size_t max_inferred_categories = 20;

/// Loads a CSV with a header row, inferring column types unless a sidecar names them.
inline DataTable load_csv_text(std::string_view text, const LoadOptions& options = {}) {
    auto records = detail::parse_csv(text);
    if (records.empty()) throw DataError("csv: missing header row");
    const std::vector<std::string>& header = records[0];
    const std::size_t ncols = header.size();
    const std::size_t nrows = records.size() - 1;
    if (nrows == 0) throw DataError("csv: no data rows");
    for (std::size_t r = 1; r < records.size(); ++r)
        if (records[r].size() != ncols)
            throw DataError("csv: ragged row " + std::to_string(r) + " (" + std::to_string(records[r].size()) + " fields, expected " + std::to_string(ncols) + ")");

    std::vector<std::string> names;
    for (const auto& h : header) names.emplace_back(detail::trim(h));

    // Locate the target column.
    std::optional<std::size_t> target;
    if (options.sidecar) {
        for (auto& [name, cs] : options.sidecar->columns) {
            if (std::find(names.begin(), names.end(), name) == names.end())
                throw DataError("schema sidecar names unknown column '" + name + "'");
            if (cs.kind == ColumnSpec::Kind::target) {
                if (target) throw DataError("schema sidecar declares more than one target");
                target = static_cast<std::size_t>(std::find(names.begin(), names.end(), name) - names.begin());
            }
        }
    }
    if (options.target) {
        auto it = std::find(names.begin(), names.end(), *options.target);
        if (it == names.end()) throw DataError("target column '" + *options.target + "' not found");
        target = static_cast<std::size_t>(it - names.begin());
    }
    if (!target) target = ncols - 1;

    std::vector<Column> columns(ncols);
    for (std::size_t c = 0; c < ncols; ++c) {
        Column& col = columns[c];
        col.name = names[c];
        std::vector<std::string_view> cells;
        cells.reserve(nrows);
        for (std::size_t r = 1; r < records.size(); ++r) {
            const std::string& cell = records[r][c];
            if (detail::is_missing_token(cell)) {
                if (c == *target || !options.allow_missing)
                    throw DataError("csv: missing value in column '" + col.name + "', row " + std::to_string(r));
                continue;
            }
            cells.push_back(cell);
        }

        std::optional<ColumnSpec> override_spec;
        if (options.sidecar) {
            if (auto it = options.sidecar->columns.find(col.name); it != options.sidecar->columns.end()) override_spec = it->second;
        }
        if (c == *target) {
            col.kind = ColumnKind::categorical;
            if (override_spec && override_spec->cardinality) {
                col.cardinality = *override_spec->cardinality;
            } else {
                col.labels = detail::infer_labels(cells);
                col.cardinality = col.labels.size();
            }
            continue;
        }
        if (override_spec && override_spec->kind == ColumnSpec::Kind::continuous) {
            col.kind = ColumnKind::continuous;
        } else if (override_spec && override_spec->kind == ColumnSpec::Kind::categorical) {
            col.kind = ColumnKind::categorical;
            if (override_spec->cardinality) {
                col.cardinality = *override_spec->cardinality;
            } else {
                col.labels = detail::infer_labels(cells);
                col.cardinality = col.labels.size();
            }
        } else {
            bool numeric = true;
            bool integral = true;
            std::set<double> distinct;
            for (auto cell : cells) {
                auto v = detail::parse_number(cell);
                if (!v) {
                    numeric = false;
                    break;
                }
                if (*v != std::floor(*v) || !std::isfinite(*v)) integral = false;
                if (distinct.size() <= max_inferred_categories) distinct.insert(*v);
            }
            if (!numeric || (integral && distinct.size() <= max_inferred_categories)) {
                col.kind = ColumnKind::categorical;
                col.labels = detail::infer_labels(cells);
                col.cardinality = col.labels.size();
                if (col.cardinality == 0) throw DataError("csv: column '" + col.name + "' has no observed values");
            } else {
                col.kind = ColumnKind::continuous;
            }
        }
    }

    auto schema = std::make_shared<const Schema>(std::move(columns), *target);
    const std::size_t m = schema->feature_count();
    std::vector<double> features(nrows * m);
    std::vector<Label> labels(nrows);
    for (std::size_t r = 0; r < nrows; ++r) {
        const auto& rec = records[r + 1];
        for (std::size_t j = 0; j < m; ++j) {
            const std::size_t c = schema->column_of_feature(j);
            const Column& col = schema->columns()[c];
            const std::string& cell = rec[c];
            double& out = features[r * m + j];
            if (detail::is_missing_token(cell)) {
                out = missing_value;
                continue;
            }
            if (col.kind == ColumnKind::continuous) {
                auto v = detail::parse_number(cell);
                if (!v) throw DataError("csv: non-numeric value '" + cell + "' in continuous column '" + col.name + "', row " + std::to_string(r + 1));
                if (!std::isfinite(*v)) throw DataError("csv: non-finite value in column '" + col.name + "', row " + std::to_string(r + 1));
                out = *v;
            } else {
                auto code = schema->code_of(c, cell);
                if (!code) throw DataError("csv: category '" + cell + "' outside declared cardinality of column '" + col.name + "'");
                out = static_cast<double>(*code);
            }
        }
        auto code = schema->code_of(*target, rec[*target]);
        if (!code) throw DataError("csv: class '" + rec[*target] + "' outside declared cardinality of column '" + names[*target] + "'");
        labels[r] = *code;
    }
    return DataTable(std::move(schema), std::move(features), std::move(labels));
}

inline DataTable load_csv(const std::string& path, const LoadOptions& options = {}) {
    return load_csv_text(read_file(path), options);
}

/// Loads a CSV against a fixed schema (e.g. the one stored in a model).
///
/// Columns are matched by name; the class column may be absent, in which case
/// the table carries no labels, and `read_labels = false` ignores it. Categories
/// must be known to the schema.
inline DataTable load_csv_text_with_schema(std::string_view text, SchemaPtr schema, bool allow_missing = true, bool read_labels = true) {
    auto records = detail::parse_csv(text);
    if (records.empty()) throw DataError("csv: missing header row");
    const std::size_t nrows = records.size() - 1;
    if (nrows == 0) throw DataError("csv: no data rows");
    const auto& header = records[0];
    for (std::size_t r = 1; r < records.size(); ++r)
        if (records[r].size() != header.size()) throw DataError("csv: ragged row " + std::to_string(r));

    auto position = [&](const std::string& name) -> std::optional<std::size_t> {
        for (std::size_t c = 0; c < header.size(); ++c)
            if (detail::trim(header[c]) == name) return c;
        return std::nullopt;
    };
    const std::size_t m = schema->feature_count();
    std::vector<std::size_t> source(m);
    for (std::size_t j = 0; j < m; ++j) {
        auto pos = position(schema->feature(j).name);
        if (!pos) throw DataError("csv: column '" + schema->feature(j).name + "' not found");
        source[j] = *pos;
    }
    const auto target_pos = read_labels ? position(schema->target().name) : std::nullopt;

    std::vector<double> features(nrows * m);
    std::vector<Label> labels;
    if (target_pos) labels.resize(nrows);
    for (std::size_t r = 0; r < nrows; ++r) {
        const auto& rec = records[r + 1];
        for (std::size_t j = 0; j < m; ++j) {
            const std::string& cell = rec[source[j]];
            double& out = features[r * m + j];
            const Column& col = schema->feature(j);
            if (detail::is_missing_token(cell)) {
                if (!allow_missing) throw DataError("csv: missing value in column '" + col.name + "', row " + std::to_string(r + 1));
                out = missing_value;
                continue;
            }
            if (col.kind == ColumnKind::continuous) {
                auto v = detail::parse_number(cell);
                if (!v || !std::isfinite(*v)) throw DataError("csv: non-numeric value '" + cell + "' in continuous column '" + col.name + "', row " + std::to_string(r + 1));
                out = *v;
            } else {
                auto code = schema->code_of(schema->column_of_feature(j), cell);
                if (!code) throw DataError("csv: unseen category '" + cell + "' in column '" + col.name + "'");
                out = static_cast<double>(*code);
            }
        }
        if (target_pos) {
            auto code = schema->code_of(schema->target_index(), rec[*target_pos]);
            if (!code) throw DataError("csv: unseen class '" + rec[*target_pos] + "'");
            labels[r] = *code;
        }
    }
    return DataTable(std::move(schema), std::move(features), std::move(labels));
}

inline DataTable load_csv_with_schema(const std::string& path, SchemaPtr schema, bool allow_missing = true, bool read_labels = true) {
    return load_csv_text_with_schema(read_file(path), std::move(schema), allow_missing, read_labels);
}

/// Writes a table as CSV in schema column order. Categories as labels, missing as `?`.
inline void write_csv(const DataTable& table, std::ostream& out) {
    const Schema& schema = table.schema();
    const auto& columns = schema.columns();
    for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c].name;
    out << '\n';
    for (std::size_t i = 0; i < table.rows(); ++i) {
        std::size_t j = 0;
        for (std::size_t c = 0; c < columns.size(); ++c) {
            if (c) out << ',';
            if (c == schema.target_index()) {
                if (table.has_labels()) out << columns[c].labels[table.label(i)];
                continue;
            }
            const double v = table.value(i, j++);
            if (is_missing(v)) out << '?';
            else if (columns[c].kind == ColumnKind::categorical) out << columns[c].labels[static_cast<std::size_t>(v)];
            else out << detail::format_double(v);
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Resampling

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Uniform shuffle under `seed`; |test| = round(test_fraction * n). Both sides sorted ascending.
inline SplitIndices train_test_split_indices(std::size_t n, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw DataError("split: test fraction must lie in (0, 1)");
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    if (n_test < 1 || n_test >= n) throw DataError("split: fraction leaves one side empty for n=" + std::to_string(n));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(order));
    SplitIndices out;
    out.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    out.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
    std::sort(out.test.begin(), out.test.end());
    std::sort(out.train.begin(), out.train.end());
    return out;
}

inline std::pair<DataTable, DataTable> train_test_split(const DataTable& table, double test_fraction, std::uint64_t seed) {
    auto idx = train_test_split_indices(table.rows(), test_fraction, seed);
    return {table.subset(idx.train), table.subset(idx.test)};
}

/// n draws with replacement from [0, n).
inline std::vector<std::size_t> bootstrap_indices(std::size_t n, std::uint64_t seed) {
    if (n == 0) throw DataError("bootstrap: empty table");
    std::vector<std::size_t> drawn(n);
    Rng rng(seed);
    for (auto& d : drawn) d = static_cast<std::size_t>(rng.below(n));
    return drawn;
}

inline std::vector<std::size_t> out_of_bag(std::size_t n, std::span<const std::size_t> drawn) {
    std::vector<char> seen(n, 0);
    for (auto d : drawn) seen[d] = 1;
    std::vector<std::size_t> oob;
    for (std::size_t i = 0; i < n; ++i)
        if (!seen[i]) oob.push_back(i);
    return oob;
}

struct Bootstrap {
    DataTable sample;
    std::vector<std::size_t> drawn;
    std::vector<std::size_t> out_of_bag;
};

inline Bootstrap bootstrap_sample(const DataTable& table, std::uint64_t seed) {
    auto drawn = bootstrap_indices(table.rows(), seed);
    auto oob = out_of_bag(table.rows(), drawn);
    return Bootstrap{table.subset(drawn), std::move(drawn), std::move(oob)};
}

}  // namespace gefs
