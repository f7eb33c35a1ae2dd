#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dse::io {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// All numeric CSV output uses 17 significant digits so values round-trip
// bit-exactly through text.
inline std::string format_full(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
        : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open for writing: " + path.string());
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i) out_ << ',';
            out_ << header[i];
        }
        out_ << '\n';
        columns_ = header.size();
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != columns_) throw std::runtime_error("csv row width mismatch");
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }

private:
    std::ofstream out_;
    std::size_t columns_ = 0;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        throw std::runtime_error("csv column not found: " + name);
    }
    double num(std::size_t row, int col) const { return std::stod(rows.at(row).at(col)); }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
    CsvTable table;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (first) {
            table.header = std::move(cells);
            first = false;
        } else {
            table.rows.push_back(std::move(cells));
        }
    }
    return table;
}

// FNV-1a 64-bit, used for artifact checksums in run manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t file_checksum(const std::filesystem::path& path) {
    std::string bytes = read_text(path);
    return fnv1a64(bytes.data(), bytes.size());
}

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("truncated binary stream");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
    put_u32(out, static_cast<std::uint32_t>(v));
    put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64(std::istream& in) {
    std::uint64_t lo = get_u32(in);
    std::uint64_t hi = get_u32(in);
    return lo | hi << 32;
}

inline void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in) {
    std::uint32_t n = get_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw std::runtime_error("truncated binary stream");
    return s;
}

inline void put_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
    put_u64(out, static_cast<std::uint64_t>(m.rows()));
    put_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            double v = m(r, c);
            out.write(reinterpret_cast<const char*>(&v), sizeof(double));
        }
}

inline Eigen::MatrixXd get_matrix(std::istream& in) {
    auto rows = static_cast<Eigen::Index>(get_u64(in));
    auto cols = static_cast<Eigen::Index>(get_u64(in));
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) {
            double v;
            in.read(reinterpret_cast<char*>(&v), sizeof(double));
            if (!in) throw std::runtime_error("truncated binary stream");
            m(r, c) = v;
        }
    return m;
}

} // namespace detail

// Versioned checkpoint container: magic, format version, then named blobs.
// Matrices are stored row-major as little-endian 64-bit floats; arbitrary
// metadata (JSON) rides along as string blobs.
struct BlobStore {
    static constexpr std::uint32_t kVersion = 1;

    std::map<std::string, Eigen::MatrixXd> matrices;
    std::map<std::string, std::string> strings;

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
        out.write("DSECKPT1", 8);
        detail::put_u32(out, kVersion);
        detail::put_u32(out, static_cast<std::uint32_t>(matrices.size()));
        for (const auto& [name, m] : matrices) {
            detail::put_string(out, name);
            detail::put_matrix(out, m);
        }
        detail::put_u32(out, static_cast<std::uint32_t>(strings.size()));
        for (const auto& [name, s] : strings) {
            detail::put_string(out, name);
            detail::put_string(out, s);
        }
    }

    static BlobStore load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("missing checkpoint: " + path.string());
        char magic[8];
        in.read(magic, 8);
        if (!in || std::string(magic, 8) != "DSECKPT1")
            throw std::runtime_error("bad checkpoint magic: " + path.string());
        std::uint32_t version = detail::get_u32(in);
        if (version != kVersion) throw std::runtime_error("unsupported checkpoint version");
        BlobStore store;
        std::uint32_t nm = detail::get_u32(in);
        for (std::uint32_t i = 0; i < nm; ++i) {
            std::string name = detail::get_string(in);
            store.matrices[name] = detail::get_matrix(in);
        }
        std::uint32_t ns = detail::get_u32(in);
        for (std::uint32_t i = 0; i < ns; ++i) {
            std::string name = detail::get_string(in);
            store.strings[name] = detail::get_string(in);
        }
        return store;
    }
};

} // namespace dse::io
