#pragma once

// Single-file uncompressed NIfTI-1 I/O (.nii), plus the raw + JSON sidecar
// format used for warp fields.
//
// Supported datatypes: uint8 (2), int16 (4), float32 (16), float64 (64).
// Both endiannesses are read (detected via sizeof_hdr); files are written
// little-endian. Orientation is assumed axis-aligned identity; qoffset
// carries the origin.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxreg/volume.hpp"

namespace voxreg {

struct FormatError : std::runtime_error {
    std::size_t offset;
    FormatError(const std::string& what, std::size_t off)
        : std::runtime_error(what + " (at byte " + std::to_string(off) + ")"), offset(off) {}
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NiftiHeader {
    std::array<std::int16_t, 8> dim{};
    std::int16_t datatype = 0;
    std::int16_t bitpix = 0;
    std::array<float, 8> pixdim{};
    float vox_offset = 352;
    float scl_slope = 0;
    float scl_inter = 0;
    std::array<float, 3> qoffset{};
    std::array<char, 4> magic{};
    bool big_endian = false;
};

struct NiftiVolume {
    NiftiHeader header;
    Volume3<double> volume;
};

namespace detail {

constexpr std::size_t kNiftiHeaderBytes = 348;
constexpr std::size_t kNiftiVoxOffset = 352;

inline std::uint16_t bswap16(std::uint16_t v) { return static_cast<std::uint16_t>((v >> 8) | (v << 8)); }
inline std::uint32_t bswap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
}
inline std::uint64_t bswap64(std::uint64_t v) {
    return (static_cast<std::uint64_t>(bswap32(static_cast<std::uint32_t>(v))) << 32) |
           bswap32(static_cast<std::uint32_t>(v >> 32));
}

template <typename T>
T read_scalar(const std::vector<unsigned char>& b, std::size_t off, bool swap) {
    if (off + sizeof(T) > b.size()) throw FormatError("truncated header", off);
    T v;
    std::memcpy(&v, b.data() + off, sizeof(T));
    if (swap) {
        if constexpr (sizeof(T) == 2) {
            std::uint16_t u;
            std::memcpy(&u, &v, 2);
            u = bswap16(u);
            std::memcpy(&v, &u, 2);
        } else if constexpr (sizeof(T) == 4) {
            std::uint32_t u;
            std::memcpy(&u, &v, 4);
            u = bswap32(u);
            std::memcpy(&v, &u, 4);
        } else if constexpr (sizeof(T) == 8) {
            std::uint64_t u;
            std::memcpy(&u, &v, 8);
            u = bswap64(u);
            std::memcpy(&v, &u, 8);
        }
    }
    return v;
}

template <typename T>
void write_scalar(std::vector<unsigned char>& b, std::size_t off, T v) {
    std::memcpy(b.data() + off, &v, sizeof(T));
}

} // namespace detail

inline NiftiVolume read_nifti_bytes(const std::vector<unsigned char>& bytes) {
    using namespace detail;
    if (bytes.size() < kNiftiHeaderBytes) throw FormatError("file shorter than header", bytes.size());

    auto sizeof_hdr = read_scalar<std::int32_t>(bytes, 0, false);
    bool swap = false;
    if (sizeof_hdr != 348) {
        if (read_scalar<std::int32_t>(bytes, 0, true) == 348)
            swap = true;
        else
            throw FormatError("sizeof_hdr is not 348 in either byte order", 0);
    }

    NiftiVolume out;
    NiftiHeader& h = out.header;
    h.big_endian = swap;
    for (int i = 0; i < 8; ++i)
        h.dim[static_cast<std::size_t>(i)] =
            read_scalar<std::int16_t>(bytes, 40 + 2 * static_cast<std::size_t>(i), swap);
    h.datatype = read_scalar<std::int16_t>(bytes, 70, swap);
    h.bitpix = read_scalar<std::int16_t>(bytes, 72, swap);
    for (int i = 0; i < 8; ++i)
        h.pixdim[static_cast<std::size_t>(i)] =
            read_scalar<float>(bytes, 76 + 4 * static_cast<std::size_t>(i), swap);
    h.vox_offset = read_scalar<float>(bytes, 108, swap);
    h.scl_slope = read_scalar<float>(bytes, 112, swap);
    h.scl_inter = read_scalar<float>(bytes, 116, swap);
    for (int i = 0; i < 3; ++i)
        h.qoffset[static_cast<std::size_t>(i)] =
            read_scalar<float>(bytes, 268 + 4 * static_cast<std::size_t>(i), swap);
    std::memcpy(h.magic.data(), bytes.data() + 344, 4);

    if (std::memcmp(h.magic.data(), "ni1", 4) == 0)
        throw FormatError("two-file NIfTI (magic \"ni1\") is unsupported", 344);
    if (std::memcmp(h.magic.data(), "n+1", 4) != 0) throw FormatError("bad magic", 344);

    if (h.dim[0] < 1 || h.dim[0] > 3) throw FormatError("only 3-D volumes supported", 40);
    Dims3 d{static_cast<std::int64_t>(h.dim[1]),
            static_cast<std::int64_t>(h.dim[0] >= 2 ? h.dim[2] : 1),
            static_cast<std::int64_t>(h.dim[0] >= 3 ? h.dim[3] : 1)};
    if (!d.positive()) throw FormatError("non-positive dims", 40);

    int bytes_per_voxel = 0;
    switch (h.datatype) {
    case 2: bytes_per_voxel = 1; break;
    case 4: bytes_per_voxel = 2; break;
    case 16: bytes_per_voxel = 4; break;
    case 64: bytes_per_voxel = 8; break;
    default: throw FormatError("unsupported datatype " + std::to_string(h.datatype), 70);
    }

    const auto off = static_cast<std::size_t>(h.vox_offset);
    const std::size_t need = off + static_cast<std::size_t>(d.voxels()) *
                                       static_cast<std::size_t>(bytes_per_voxel);
    if (bytes.size() < need) throw FormatError("truncated payload", bytes.size());

    out.volume = Volume3<double>::zeros(d);
    for (int c = 0; c < 3; ++c) {
        const float s = h.pixdim[static_cast<std::size_t>(c + 1)];
        out.volume.spacing[static_cast<std::size_t>(c)] = s > 0 ? s : 1.0;
        out.volume.origin[static_cast<std::size_t>(c)] = h.qoffset[static_cast<std::size_t>(c)];
    }
    const bool apply_scl = h.scl_slope != 0.0f;
    for (std::int64_t k = 0; k < d.voxels(); ++k) {
        const std::size_t p = off + static_cast<std::size_t>(k) *
                                        static_cast<std::size_t>(bytes_per_voxel);
        double v = 0;
        switch (h.datatype) {
        case 2: v = static_cast<double>(bytes[p]); break;
        case 4: v = static_cast<double>(detail::read_scalar<std::int16_t>(bytes, p, swap)); break;
        case 16: v = static_cast<double>(detail::read_scalar<float>(bytes, p, swap)); break;
        case 64: v = detail::read_scalar<double>(bytes, p, swap); break;
        }
        if (apply_scl) v = static_cast<double>(h.scl_slope) * v + static_cast<double>(h.scl_inter);
        out.volume.data[static_cast<std::size_t>(k)] = v;
    }
    return out;
}

inline NiftiVolume read_nifti(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    return read_nifti_bytes(bytes);
}

namespace detail {

inline std::vector<unsigned char> nifti_bytes_common(Dims3 d, const Vec3& spacing,
                                                     const Vec3& origin, std::int16_t datatype,
                                                     std::int16_t bitpix) {
    if (d.nx > 32767 || d.ny > 32767 || d.nz > 32767)
        throw std::invalid_argument("write_nifti: dims exceed int16 header fields");
    std::vector<unsigned char> b(kNiftiVoxOffset, 0);
    write_scalar<std::int32_t>(b, 0, 348);
    write_scalar<std::int16_t>(b, 40, 3);
    write_scalar<std::int16_t>(b, 42, static_cast<std::int16_t>(d.nx));
    write_scalar<std::int16_t>(b, 44, static_cast<std::int16_t>(d.ny));
    write_scalar<std::int16_t>(b, 46, static_cast<std::int16_t>(d.nz));
    for (int i = 4; i < 8; ++i) write_scalar<std::int16_t>(b, 40 + 2 * static_cast<std::size_t>(i), 1);
    write_scalar<std::int16_t>(b, 70, datatype);
    write_scalar<std::int16_t>(b, 72, bitpix);
    write_scalar<float>(b, 76, 1.0f);
    for (int c = 0; c < 3; ++c)
        write_scalar<float>(b, 80 + 4 * static_cast<std::size_t>(c),
                            static_cast<float>(spacing[static_cast<std::size_t>(c)]));
    write_scalar<float>(b, 108, static_cast<float>(kNiftiVoxOffset));
    write_scalar<float>(b, 112, 0.0f); // scl_slope 0: raw values already real
    write_scalar<float>(b, 116, 0.0f);
    for (int c = 0; c < 3; ++c)
        write_scalar<float>(b, 268 + 4 * static_cast<std::size_t>(c),
                            static_cast<float>(origin[static_cast<std::size_t>(c)]));
    b[344] = 'n';
    b[345] = '+';
    b[346] = '1';
    b[347] = 0;
    return b;
}

inline void dump_file(const std::string& path, const std::vector<unsigned char>& bytes) {
    if (path.empty()) throw IoError("empty output path");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + path);
}

} // namespace detail

template <typename T>
void write_nifti(const Volume3<T>& v, const std::string& path) {
    const bool f64 = sizeof(T) == 8;
    auto bytes = detail::nifti_bytes_common(v.dims, v.spacing, v.origin, f64 ? 64 : 16,
                                            f64 ? 64 : 32);
    const std::size_t payload = static_cast<std::size_t>(v.dims.voxels()) * sizeof(T);
    bytes.resize(detail::kNiftiVoxOffset + payload);
    std::memcpy(bytes.data() + detail::kNiftiVoxOffset, v.data.data(), payload);
    detail::dump_file(path, bytes);
}

inline void write_nifti(const LabelVolume& v, const std::string& path) {
    auto bytes = detail::nifti_bytes_common(v.dims, v.spacing, Vec3{0, 0, 0}, 4, 16);
    const std::size_t payload = static_cast<std::size_t>(v.dims.voxels()) * 2;
    bytes.resize(detail::kNiftiVoxOffset + payload);
    for (std::int64_t k = 0; k < v.dims.voxels(); ++k) {
        const auto raw = static_cast<std::int16_t>(v.data[static_cast<std::size_t>(k)]);
        detail::write_scalar<std::int16_t>(
            bytes, detail::kNiftiVoxOffset + 2 * static_cast<std::size_t>(k), raw);
    }
    detail::dump_file(path, bytes);
}

inline LabelVolume nifti_to_labels(const NiftiVolume& nv) {
    LabelVolume lv = LabelVolume::zeros(nv.volume.dims);
    lv.spacing = nv.volume.spacing;
    for (std::size_t k = 0; k < nv.volume.data.size(); ++k) {
        const double v = nv.volume.data[k];
        const auto r = static_cast<std::int64_t>(std::llround(v));
        if (std::abs(v - static_cast<double>(r)) > 1e-6 || r < 0 || r > 65535)
            throw FormatError("label volume has non-integer values", k);
        lv.data[k] = static_cast<std::uint16_t>(r);
    }
    return lv;
}

// --- raw + JSON sidecar (warp fields) --------------------------------------

template <typename T>
void write_warp(const WarpField<T>& w, const std::string& prefix,
                const Vec3& spacing = {1, 1, 1}, const Vec3& origin = {0, 0, 0}) {
    std::vector<unsigned char> raw(w.data.size() * sizeof(double));
    for (std::size_t i = 0; i < w.data.size(); ++i) {
        const double v = static_cast<double>(w.data[i]);
        std::memcpy(raw.data() + i * sizeof(double), &v, sizeof(double));
    }
    detail::dump_file(prefix + ".raw", raw);

    nlohmann::ordered_json meta;
    meta["dims"] = {w.dims.nx, w.dims.ny, w.dims.nz};
    meta["spacing"] = {spacing[0], spacing[1], spacing[2]};
    meta["origin"] = {origin[0], origin[1], origin[2]};
    meta["channels"] = 3;
    std::ofstream f(prefix + ".json");
    if (!f) throw IoError("cannot open " + prefix + ".json for writing");
    f << meta.dump(2) << "\n";
}

inline WarpField<double> read_warp(const std::string& prefix) {
    std::ifstream jf(prefix + ".json");
    if (!jf) throw IoError("cannot open " + prefix + ".json");
    nlohmann::json meta = nlohmann::json::parse(jf);
    Dims3 d{meta["dims"][0].get<std::int64_t>(), meta["dims"][1].get<std::int64_t>(),
            meta["dims"][2].get<std::int64_t>()};
    if (meta["channels"].get<int>() != 3) throw IoError("warp sidecar: channels must be 3");
    auto w = WarpField<double>::zeros(d);
    std::ifstream rf(prefix + ".raw", std::ios::binary);
    if (!rf) throw IoError("cannot open " + prefix + ".raw");
    rf.read(reinterpret_cast<char*>(w.data.data()),
            static_cast<std::streamsize>(w.data.size() * sizeof(double)));
    if (rf.gcount() != static_cast<std::streamsize>(w.data.size() * sizeof(double)))
        throw IoError("warp raw payload truncated");
    return w;
}

} // namespace voxreg
