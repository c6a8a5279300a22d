#pragma once

// Coded grid projection pattern.
//
// Nodes sit on the lattice points (j * period_u, i * period_v) of the projector raster and carry one
// of five glyph codes. Grid lines run midway between nodes, so a line is at phase 0.5 of the cell
// that starts at a node.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oneshot/core/error.hpp"
#include "oneshot/core/image.hpp"

namespace oneshot {

inline constexpr int kNumCodes = 5;
inline constexpr int kGlyphSize = 5;

enum class Direction : std::uint8_t { Up = 0, Down = 1, Left = 2, Right = 3 };
inline constexpr std::array<Direction, 4> kDirections = {Direction::Up, Direction::Down, Direction::Left, Direction::Right};

constexpr Direction opposite(Direction d) {
    switch (d) {
        case Direction::Up: return Direction::Down;
        case Direction::Down: return Direction::Up;
        case Direction::Left: return Direction::Right;
        case Direction::Right: return Direction::Left;
    }
    return d;
}

constexpr int index_of(Direction d) { return static_cast<int>(d); }

inline const char* to_string(Direction d) {
    static constexpr const char* names[] = {"up", "down", "left", "right"};
    return names[index_of(d)];
}

inline Direction direction_from_string(const std::string& s) {
    for (auto d : kDirections)
        if (s == to_string(d)) return d;
    throw FormatError("unknown direction '" + s + "'");
}

struct GridPattern {
    int rows = 0;
    int cols = 0;
    int period_u = 16;
    int period_v = 16;
    int width = 0;   // projector raster size
    int height = 0;
    std::uint64_t code_seed = 0;
    std::vector<std::uint8_t> codes;  // row-major, id = i * cols + j

    int node_count() const { return rows * cols; }
    int id(int i, int j) const { return i * cols + j; }
    int row_of(int id) const { return id / cols; }
    int col_of(int id) const { return id % cols; }
    bool contains_id(long id) const { return id >= 0 && id < static_cast<long>(node_count()); }
    int code(int i, int j) const { return codes[static_cast<std::size_t>(id(i, j))]; }
    int code_of(int id) const { return codes[static_cast<std::size_t>(id)]; }

    /// Projector position of a lattice node.
    double node_u(int j) const { return static_cast<double>(j) * period_u; }
    double node_v(int i) const { return static_cast<double>(i) * period_v; }

    void validate() const {
        if (rows < 1 || cols < 1) throw ConfigError("pattern needs at least one row and one column");
        if (period_u < 4 || period_v < 4) throw ConfigError("pattern periods must be at least 4 px");
        if (static_cast<long>(cols) * period_u > width || static_cast<long>(rows) * period_v > height)
            throw ConfigError("pattern lattice exceeds projector resolution");
        if (codes.size() != static_cast<std::size_t>(node_count())) throw ConfigError("pattern code table has wrong size");
        for (auto c : codes)
            if (c >= kNumCodes) throw ConfigError("pattern code out of range");
    }

    friend bool operator==(const GridPattern&, const GridPattern&) = default;
};

/// Deterministic pattern; each row is rejection-sampled until no two horizontal neighbors share a code.
/// A zero resolution means the tight fit cols*period_u x rows*period_v.
inline GridPattern generate_pattern(int rows, int cols, int period_u, int period_v, std::uint64_t code_seed,
                                    int width = 0, int height = 0) {
    GridPattern p;
    p.rows = rows;
    p.cols = cols;
    p.period_u = period_u;
    p.period_v = period_v;
    p.width = width > 0 ? width : cols * period_u;
    p.height = height > 0 ? height : rows * period_v;
    p.code_seed = code_seed;
    if (rows < 1 || cols < 1) throw ConfigError("pattern needs at least one row and one column");
    if (period_u < 4 || period_v < 4) throw ConfigError("pattern periods must be at least 4 px");
    if (static_cast<long>(cols) * period_u > p.width || static_cast<long>(rows) * period_v > p.height)
        throw ConfigError("pattern lattice exceeds projector resolution");

    std::mt19937_64 rng(code_seed);
    p.codes.resize(static_cast<std::size_t>(rows) * cols);
    std::vector<std::uint8_t> row(static_cast<std::size_t>(cols));
    for (int i = 0; i < rows; ++i) {
        while (true) {
            for (auto& c : row) c = static_cast<std::uint8_t>(rng() % kNumCodes);
            bool ok = true;
            for (int j = 1; j < cols && ok; ++j) ok = row[j] != row[j - 1];
            if (ok) break;
        }
        std::copy(row.begin(), row.end(), p.codes.begin() + static_cast<std::ptrdiff_t>(i) * cols);
    }
    return p;
}

// --- adjacency ---------------------------------------------------------------

inline constexpr std::int32_t kNoNode = -1;

/// Neighbor IDs per node in the four lattice directions (kNoNode at the boundary).
struct PatternAdjacency {
    std::vector<std::array<std::int32_t, 4>> neighbors;

    std::size_t size() const { return neighbors.size(); }
    std::int32_t operator()(std::int32_t id, Direction d) const {
        if (id < 0 || static_cast<std::size_t>(id) >= neighbors.size()) return kNoNode;
        return neighbors[static_cast<std::size_t>(id)][index_of(d)];
    }

    /// Throws ConfigError unless right/left and down/up are mutual inverses.
    void validate() const {
        for (std::size_t n = 0; n < neighbors.size(); ++n)
            for (auto d : kDirections) {
                const auto m = neighbors[n][index_of(d)];
                if (m == kNoNode) continue;
                if (m < 0 || static_cast<std::size_t>(m) >= neighbors.size())
                    throw ConfigError("adjacency refers to a node outside the pattern");
                if (neighbors[static_cast<std::size_t>(m)][index_of(opposite(d))] != static_cast<std::int32_t>(n))
                    throw ConfigError("adjacency is not symmetric at node " + std::to_string(n));
            }
    }
};

inline PatternAdjacency adjacency(const GridPattern& p) {
    PatternAdjacency a;
    a.neighbors.resize(static_cast<std::size_t>(p.node_count()));
    for (int i = 0; i < p.rows; ++i)
        for (int j = 0; j < p.cols; ++j) {
            auto& n = a.neighbors[static_cast<std::size_t>(p.id(i, j))];
            n[index_of(Direction::Up)] = i > 0 ? p.id(i - 1, j) : kNoNode;
            n[index_of(Direction::Down)] = i + 1 < p.rows ? p.id(i + 1, j) : kNoNode;
            n[index_of(Direction::Left)] = j > 0 ? p.id(i, j - 1) : kNoNode;
            n[index_of(Direction::Right)] = j + 1 < p.cols ? p.id(i, j + 1) : kNoNode;
        }
    return a;
}

// --- rasterization -------------------------------------------------------------

using GlyphMask = std::array<std::array<std::uint8_t, kGlyphSize>, kGlyphSize>;

/// Binary glyph per code: dot, ring, cross, horizontal bar, vertical bar. All are point-symmetric
/// about their center so the glyph centroid is the lattice point.
inline const std::array<GlyphMask, kNumCodes>& glyphs() {
    static const std::array<GlyphMask, kNumCodes> g = {{
        {{{0, 1, 1, 1, 0}, {1, 1, 1, 1, 1}, {1, 1, 1, 1, 1}, {1, 1, 1, 1, 1}, {0, 1, 1, 1, 0}}},
        {{{0, 1, 1, 1, 0}, {1, 0, 0, 0, 1}, {1, 0, 0, 0, 1}, {1, 0, 0, 0, 1}, {0, 1, 1, 1, 0}}},
        {{{0, 0, 1, 0, 0}, {0, 0, 1, 0, 0}, {1, 1, 1, 1, 1}, {0, 0, 1, 0, 0}, {0, 0, 1, 0, 0}}},
        {{{0, 0, 0, 0, 0}, {1, 1, 1, 1, 1}, {1, 1, 1, 1, 1}, {1, 1, 1, 1, 1}, {0, 0, 0, 0, 0}}},
        {{{0, 1, 1, 1, 0}, {0, 1, 1, 1, 0}, {0, 1, 1, 1, 0}, {0, 1, 1, 1, 0}, {0, 1, 1, 1, 0}}},
    }};
    return g;
}

/// Line width used by rasterize_pattern: 3 px once cells are large enough, else 1 px.
inline int default_line_width(const GridPattern& p) { return std::min(p.period_u, p.period_v) >= 12 ? 3 : 1; }

inline ImageU8 rasterize_pattern(const GridPattern& p, int line_width = 0) {
    p.validate();
    if (line_width <= 0) line_width = default_line_width(p);
    const double half = 0.5 * (line_width - 1) + 1e-9;
    ImageU8 img(p.width, p.height, 0);

    for (int j = 0; (j + 0.5) * p.period_u < p.width; ++j) {
        const double c = (j + 0.5) * p.period_u;
        for (int x = static_cast<int>(std::floor(c - half)); x <= static_cast<int>(std::ceil(c + half)); ++x)
            if (x >= 0 && x < p.width && std::abs(x - c) <= half)
                for (int y = 0; y < p.height; ++y) img(x, y) = 255;
    }
    for (int i = 0; (i + 0.5) * p.period_v < p.height; ++i) {
        const double c = (i + 0.5) * p.period_v;
        for (int y = static_cast<int>(std::floor(c - half)); y <= static_cast<int>(std::ceil(c + half)); ++y)
            if (y >= 0 && y < p.height && std::abs(y - c) <= half)
                for (int x = 0; x < p.width; ++x) img(x, y) = 255;
    }

    constexpr int r = kGlyphSize / 2;
    for (int i = 0; i < p.rows; ++i)
        for (int j = 0; j < p.cols; ++j) {
            const auto& g = glyphs()[p.code(i, j)];
            const int u0 = j * p.period_u, v0 = i * p.period_v;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx)
                    if (g[dy + r][dx + r] && img.contains(u0 + dx, v0 + dy)) img(u0 + dx, v0 + dy) = 255;
        }
    return img;
}

// --- JSON ----------------------------------------------------------------------

inline nlohmann::json to_json(const GridPattern& p) {
    nlohmann::json codes = nlohmann::json::array();
    for (int i = 0; i < p.rows; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < p.cols; ++j) row.push_back(p.code(i, j));
        codes.push_back(std::move(row));
    }
    return {{"rows", p.rows},         {"cols", p.cols},     {"period_u", p.period_u}, {"period_v", p.period_v},
            {"width", p.width},       {"height", p.height}, {"code_seed", p.code_seed}, {"codes", codes}};
}

inline GridPattern pattern_from_json(const nlohmann::json& j) {
    GridPattern p;
    try {
        p.rows = j.at("rows").get<int>();
        p.cols = j.at("cols").get<int>();
        p.period_u = j.at("period_u").get<int>();
        p.period_v = j.at("period_v").get<int>();
        p.width = j.at("width").get<int>();
        p.height = j.at("height").get<int>();
        p.code_seed = j.value("code_seed", std::uint64_t{0});
        const auto& codes = j.at("codes");
        if (codes.size() != static_cast<std::size_t>(std::max(p.rows, 0)))
            throw ConfigError("pattern: codes has " + std::to_string(codes.size()) + " rows, expected " + std::to_string(p.rows));
        for (std::size_t i = 0; i < codes.size(); ++i) {
            if (codes[i].size() != static_cast<std::size_t>(p.cols))
                throw ConfigError("pattern: codes row " + std::to_string(i) + " has wrong length");
            for (const auto& c : codes[i]) {
                const int v = c.get<int>();
                if (v < 0 || v >= kNumCodes) throw ConfigError("pattern: code out of range in row " + std::to_string(i));
                p.codes.push_back(static_cast<std::uint8_t>(v));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("pattern: ") + e.what());
    }
    p.validate();
    return p;
}

}  // namespace oneshot
