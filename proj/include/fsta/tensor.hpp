#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fsta {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Live-element accounting used by the memory instrumentation of the cost
/// model. Disabled by default; when enabled, every Tensor allocation on the
/// current thread updates the live count and the peak.
struct AllocStats {
    long long live = 0;
    long long peak = 0;
    bool enabled = false;

    void on_alloc(long long n) {
        if (!enabled || n == 0) return;
        live += n;
        peak = std::max(peak, live);
    }
    void on_free(long long n) {
        if (!enabled || n == 0) return;
        live -= n;
    }
};

inline AllocStats& alloc_stats() {
    thread_local AllocStats stats;
    return stats;
}

/// RAII scope that turns on allocation counting for the current thread and
/// captures the peak live element count observed inside the scope.
class AllocScope {
public:
    AllocScope() {
        auto& s = alloc_stats();
        prev_enabled_ = s.enabled;
        s.enabled = true;
        s.live = 0;
        s.peak = 0;
    }
    ~AllocScope() { alloc_stats().enabled = prev_enabled_; }
    long long peak() const { return alloc_stats().peak; }

private:
    bool prev_enabled_;
};

/// Dense row-major tensor of doubles. Shape is fixed at construction;
/// element values may be filled in afterwards.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(shape_numel(shape_), 0.0);
        count_alloc();
    }

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (shape_numel(shape_) != data_.size())
            throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
        count_alloc();
    }

    Tensor(const Tensor& other) : shape_(other.shape_), data_(other.data_) { count_alloc(); }

    Tensor(Tensor&& other) noexcept
        : shape_(std::move(other.shape_)), data_(std::move(other.data_)), counted_(other.counted_) {
        other.counted_ = 0;
        other.shape_.clear();
    }

    Tensor& operator=(const Tensor& other) {
        if (this != &other) {
            count_free();
            shape_ = other.shape_;
            data_ = other.data_;
            count_alloc();
        }
        return *this;
    }

    Tensor& operator=(Tensor&& other) noexcept {
        if (this != &other) {
            count_free();
            shape_ = std::move(other.shape_);
            data_ = std::move(other.data_);
            counted_ = other.counted_;
            other.counted_ = 0;
            other.shape_.clear();
        }
        return *this;
    }

    ~Tensor() { count_free(); }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

    double* ptr() { return data_.data(); }
    const double* ptr() const { return data_.data(); }
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void require_finite(const char* where) const {
        if (!all_finite())
            throw std::runtime_error(std::string(where) + ": non-finite value in tensor " +
                                     shape_str(shape_));
    }

private:
    void validate_shape() const {
        for (auto e : shape_)
            if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(shape_));
    }
    void count_alloc() {
        counted_ = static_cast<long long>(data_.size());
        alloc_stats().on_alloc(counted_);
    }
    void count_free() {
        alloc_stats().on_free(counted_);
        counted_ = 0;
    }

    Shape shape_;
    std::vector<double> data_;
    long long counted_ = 0;
};

inline void require_shape(const Tensor& t, const Shape& expected, const char* what) {
    if (t.shape() != expected)
        throw std::invalid_argument(std::string(what) + ": expected shape " + shape_str(expected) +
                                    ", got " + shape_str(t.shape()));
}

/// Deterministic random source. Wraps mt19937_64 with explicit value
/// derivations so streams are reproducible independent of the standard
/// library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    Tensor tensor_uniform(Shape shape, double lo, double hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.data()) v = uniform(lo, hi);
        return t;
    }

    Tensor tensor_normal(Shape shape, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& v : t.data()) v = stddev * normal();
        return t;
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Serialization.
//
// Single-tensor container:
//   magic "FSTA1" | dtype u8 (0=f32, 1=f64) | rank u32 LE | extents u32 LE
//   | raw little-endian values.
//
// Named archive (checkpoints): magic "FSTAC" | count u32 LE | count entries
// of (name_len u32 LE | name bytes | single-tensor container).
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("tensor container: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline void save_tensor(std::ostream& os, const Tensor& t, DType dtype = DType::f64) {
    os.write("FSTA1", 5);
    char tag = static_cast<char>(dtype);
    os.write(&tag, 1);
    detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::write_u32(os, static_cast<std::uint32_t>(e));
    if (dtype == DType::f64) {
        static_assert(std::endian::native == std::endian::little);
        os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * 8));
    } else {
        std::vector<float> f(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) f[i] = static_cast<float>(t[i]);
        os.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
    }
}

inline Tensor load_tensor(std::istream& is) {
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, "FSTA1", 5) != 0)
        throw std::runtime_error("tensor container: bad magic");
    char tag;
    is.read(&tag, 1);
    if (tag != 0 && tag != 1) throw std::runtime_error("tensor container: unknown dtype tag");
    std::uint32_t rank = detail::read_u32(is);
    if (rank > 16) throw std::runtime_error("tensor container: rank too large");
    Shape shape(rank);
    for (auto& e : shape) e = detail::read_u32(is);
    Tensor t(shape);
    if (tag == 1) {
        is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * 8));
    } else {
        std::vector<float> f(t.size());
        is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(f[i]);
    }
    if (!is) throw std::runtime_error("tensor container: truncated payload");
    return t;
}

inline void save_tensor_file(const std::string& path, const Tensor& t, DType dtype = DType::f64) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    save_tensor(os, t, dtype);
}

inline Tensor load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for read: " + path);
    return load_tensor(is);
}

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_archive(std::ostream& os, const NamedTensors& entries) {
    os.write("FSTAC", 5);
    detail::write_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        save_tensor(os, t);
    }
}

inline NamedTensors load_archive(std::istream& is) {
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, "FSTAC", 5) != 0)
        throw std::runtime_error("tensor archive: bad magic");
    std::uint32_t count = detail::read_u32(is);
    NamedTensors entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t len = detail::read_u32(is);
        if (len > 4096) throw std::runtime_error("tensor archive: name too long");
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw std::runtime_error("tensor archive: truncated entry name");
        entries.emplace_back(std::move(name), load_tensor(is));
    }
    return entries;
}

inline void save_archive_file(const std::string& path, const NamedTensors& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    save_archive(os, entries);
}

inline NamedTensors load_archive_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for read: " + path);
    return load_archive(is);
}

}  // namespace fsta
