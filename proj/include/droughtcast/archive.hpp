#pragma once

// GRD1 on-disk archive: per variable-year a structured-text header plus a raw
// little-endian float32 row-major payload. Climatology tables, normalization
// stats and scalar climate-index series live in the same directory.
//
// Layout of an archive directory:
//   archive.txt                manifest: grid, years, variables, provenance
//   <var>_<year>.grd1 / .bin   daily cube [T, lat, lon]
//   <var>_static.grd1 / .bin   time-invariant field [1, lat, lon]
//   <var>_cycle.grd1 / .bin    366-slot day-of-year cycle
//   clim_<var>_mean.grd1/.bin  climatology mean [366, lat, lon]
//   clim_<var>_std.grd1/.bin   pooled climatology std [366, lat, lon]
//   stats.txt                  per-variable normalization mean/std
//   indices/<var>.txt          date,value lines for scalar series

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <mutex>
#include <fstream>
#include <list>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "droughtcast/catalog.hpp"
#include "droughtcast/date.hpp"
#include "droughtcast/grid.hpp"

namespace droughtcast {

constexpr float kFillValue = -9.969209968386869e36f;

inline bool is_missing(double v) { return v < -9.0e36; }

struct Grd1Meta {
    std::string variable;
    std::string units;
    std::string role;
    std::string source = "unknown";
    std::string time_tag;  // year number, "static", or "cycle"
    int n_time = 0, n_lat = 0, n_lon = 0;
    std::vector<double> lat, lon;
    double fill = kFillValue;
    std::string payload;
};

namespace grd1 {

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write(const std::filesystem::path& dir, const std::string& base, const Grd1Meta& meta,
                  const std::vector<float>& data) {
    if (static_cast<std::size_t>(meta.n_time) * meta.n_lat * meta.n_lon != data.size())
        throw std::invalid_argument("grd1: payload size does not match dims for " + base);
    std::filesystem::create_directories(dir);
    const std::string payload = base + ".bin";
    std::ofstream hdr(dir / (base + ".grd1"));
    if (!hdr) throw std::runtime_error("grd1: cannot write header for " + base);
    hdr << "GRD1\n";
    hdr << "variable " << meta.variable << "\n";
    hdr << "units " << meta.units << "\n";
    hdr << "role " << meta.role << "\n";
    hdr << "source " << meta.source << "\n";
    hdr << "time " << meta.time_tag << "\n";
    hdr << "dims " << meta.n_time << " " << meta.n_lat << " " << meta.n_lon << "\n";
    hdr << "lat";
    for (double v : meta.lat) hdr << " " << fmt_g17(v);
    hdr << "\nlon";
    for (double v : meta.lon) hdr << " " << fmt_g17(v);
    hdr << "\nfill " << fmt_g17(meta.fill) << "\n";
    hdr << "byte_order little_endian\n";
    hdr << "element f32\n";
    hdr << "payload " << payload << "\n";
    std::ofstream bin(dir / payload, std::ios::binary);
    if (!bin) throw std::runtime_error("grd1: cannot write payload for " + base);
    bin.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
}

inline std::pair<Grd1Meta, std::vector<float>> read(const std::filesystem::path& dir,
                                                    const std::string& base) {
    std::ifstream hdr(dir / (base + ".grd1"));
    if (!hdr) throw std::runtime_error("grd1: missing header " + (dir / (base + ".grd1")).string());
    std::string magic;
    std::getline(hdr, magic);
    if (magic != "GRD1") throw std::runtime_error("grd1: bad magic in " + base);
    Grd1Meta meta;
    std::string line;
    while (std::getline(hdr, line)) {
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "variable") is >> meta.variable;
        else if (key == "units") { std::string rest; std::getline(is, rest); meta.units = rest.empty() ? "" : rest.substr(1); }
        else if (key == "role") is >> meta.role;
        else if (key == "source") is >> meta.source;
        else if (key == "time") is >> meta.time_tag;
        else if (key == "dims") is >> meta.n_time >> meta.n_lat >> meta.n_lon;
        else if (key == "lat") { double v; while (is >> v) meta.lat.push_back(v); }
        else if (key == "lon") { double v; while (is >> v) meta.lon.push_back(v); }
        else if (key == "fill") is >> meta.fill;
        else if (key == "payload") is >> meta.payload;
        else if (key == "byte_order" || key == "element") { /* fixed by format */ }
        else if (!key.empty()) throw std::runtime_error("grd1: unknown header key '" + key + "' in " + base);
    }
    const std::size_t n = static_cast<std::size_t>(meta.n_time) * meta.n_lat * meta.n_lon;
    std::vector<float> data(n);
    std::ifstream bin(dir / meta.payload, std::ios::binary);
    if (!bin) throw std::runtime_error("grd1: missing payload " + meta.payload);
    bin.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (static_cast<std::size_t>(bin.gcount()) != n * sizeof(float))
        throw std::runtime_error("grd1: short payload " + meta.payload);
    return {std::move(meta), std::move(data)};
}

}  // namespace grd1

struct Provenance {
    std::string config_hash = "0";
    std::uint64_t seed = 0;
    std::string version = "0";
    std::string stage = "raw";

    std::string to_line() const {
        std::ostringstream os;
        os << "provenance config_hash=" << config_hash << " seed=" << seed << " version=" << version
           << " stage=" << stage;
        return os.str();
    }
};

class Archive {
  public:
    Archive() = default;

    static Archive create(const std::filesystem::path& dir, GridSpec grid, std::vector<int> years,
                          const VariableCatalog& catalog, Provenance prov) {
        Archive a;
        a.dir_ = dir;
        a.grid_ = std::move(grid);
        a.years_ = std::move(years);
        a.prov_ = std::move(prov);
        a.catalog_hash_ = catalog.hash();
        std::filesystem::create_directories(dir);
        a.write_manifest();
        return a;
    }

    static Archive open(const std::filesystem::path& dir) {
        Archive a;
        a.dir_ = dir;
        std::ifstream f(dir / "archive.txt");
        if (!f) throw std::runtime_error("archive: missing manifest in " + dir.string());
        std::string line;
        std::vector<double> lat, lon;
        while (std::getline(f, line)) {
            std::istringstream is(line);
            std::string key;
            is >> key;
            if (key == "grid") {
                int nlat, nlon;
                is >> nlat >> nlon;
                (void)nlat;
                (void)nlon;
            } else if (key == "lat") {
                double v;
                while (is >> v) lat.push_back(v);
            } else if (key == "lon") {
                double v;
                while (is >> v) lon.push_back(v);
            } else if (key == "years") {
                int y;
                while (is >> y) a.years_.push_back(y);
            } else if (key == "catalog_hash") {
                is >> std::hex >> a.catalog_hash_ >> std::dec;
            } else if (key == "provenance") {
                std::string kv;
                while (is >> kv) {
                    auto eq = kv.find('=');
                    if (eq == std::string::npos) continue;
                    std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
                    if (k == "config_hash") a.prov_.config_hash = v;
                    else if (k == "seed") a.prov_.seed = std::stoull(v);
                    else if (k == "version") a.prov_.version = v;
                    else if (k == "stage") a.prov_.stage = v;
                }
            }
        }
        if (lat.empty() || lon.empty()) throw std::runtime_error("archive: manifest missing grid axes");
        a.grid_ = GridSpec::from_axes(std::move(lat), std::move(lon));
        return a;
    }

    const std::filesystem::path& dir() const { return dir_; }
    const GridSpec& grid() const { return grid_; }
    const std::vector<int>& years() const { return years_; }
    const Provenance& provenance() const { return prov_; }
    std::uint64_t catalog_hash() const { return catalog_hash_; }

    bool has(const std::string& base) const { return std::filesystem::exists(dir_ / (base + ".grd1")); }
    bool has_cube(const std::string& var, int year) const { return has(var + "_" + std::to_string(year)); }

    // --- cube access (cached) ----------------------------------------------

    using FloatCube = std::shared_ptr<const std::vector<float>>;

    FloatCube cube(const std::string& var, int year) const {
        return load_cached(var + "_" + std::to_string(year));
    }

    // [H,W] doubles for one variable-date; missing values become kFillValue.
    std::vector<double> field(const std::string& var, const Date& date) const {
        const auto c = cube(var, date.year);
        const std::size_t cells = grid_.cells();
        const int t = day_of_year(date) - 1;
        if (static_cast<std::size_t>(t + 1) * cells > c->size())
            throw std::runtime_error("archive: date " + format_date(date) + " outside cube for " + var);
        std::vector<double> out(cells);
        const float* p = c->data() + static_cast<std::size_t>(t) * cells;
        for (std::size_t i = 0; i < cells; ++i) out[i] = p[i];
        return out;
    }

    FloatCube static_field(const std::string& var) const { return load_cached(var + "_static"); }

    FloatCube cycle(const std::string& var) const { return load_cached(var + "_cycle"); }

    // --- writes -------------------------------------------------------------

    void write_cube(const std::string& var, int year, const std::vector<float>& data,
                    const std::string& units, const std::string& role, const std::string& source) {
        const int days = days_in_year(year);
        Grd1Meta m = base_meta(var, units, role, source);
        m.time_tag = std::to_string(year);
        m.n_time = days;
        grd1::write(dir_, var + "_" + std::to_string(year), m, data);
    }

    void write_static(const std::string& var, const std::vector<float>& data, const std::string& units,
                      const std::string& source) {
        Grd1Meta m = base_meta(var, units, "static", source);
        m.time_tag = "static";
        m.n_time = 1;
        grd1::write(dir_, var + "_static", m, data);
    }

    void write_cycle(const std::string& var, const std::vector<float>& data, const std::string& units,
                     const std::string& source) {
        Grd1Meta m = base_meta(var, units, "cyclic_forcing", source);
        m.time_tag = "cycle";
        m.n_time = 366;
        grd1::write(dir_, var + "_cycle", m, data);
    }

    // --- scalar index series -------------------------------------------------

    void write_scalar_series(const std::string& var, const std::map<std::int64_t, double>& series) {
        std::filesystem::create_directories(dir_ / "indices");
        std::ofstream f(dir_ / "indices" / (var + ".txt"));
        if (!f) throw std::runtime_error("archive: cannot write index series " + var);
        for (const auto& [serial, v] : series)
            f << format_date(date_from_serial(serial)) << "," << grd1::fmt_g17(v) << "\n";
    }

    double scalar_index(const std::string& var, const Date& date) const {
        const auto& s = scalar_series(var);
        auto it = s.find(serial_from_date(date));
        if (it == s.end())
            throw std::runtime_error("archive: no " + var + " value for " + format_date(date));
        return it->second;
    }

    const std::map<std::int64_t, double>& scalar_series(const std::string& var) const {
        std::lock_guard<std::mutex> lock(*cache_mutex_);
        auto it = scalar_cache_.find(var);
        if (it != scalar_cache_.end()) return it->second;
        std::ifstream f(dir_ / "indices" / (var + ".txt"));
        if (!f) throw std::runtime_error("archive: missing index series " + var);
        std::map<std::int64_t, double> s;
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            auto comma = line.find(',');
            if (comma == std::string::npos) throw std::runtime_error("archive: bad index line '" + line + "'");
            s[serial_from_date(parse_date(line.substr(0, comma)))] = std::stod(line.substr(comma + 1));
        }
        return scalar_cache_.emplace(var, std::move(s)).first->second;
    }

    // --- climatology ----------------------------------------------------------

    void write_climatology(const std::string& var, const std::vector<float>& mean366,
                           const std::vector<float>& std366, const std::string& units) {
        Grd1Meta m = base_meta(var, units, "climatology_mean", "preprocess");
        m.time_tag = "cycle";
        m.n_time = 366;
        grd1::write(dir_, "clim_" + var + "_mean", m, mean366);
        m.role = "climatology_std";
        grd1::write(dir_, "clim_" + var + "_std", m, std366);
    }

    bool has_climatology(const std::string& var) const { return has("clim_" + var + "_mean"); }
    FloatCube clim_mean(const std::string& var) const { return load_cached("clim_" + var + "_mean"); }
    FloatCube clim_std(const std::string& var) const { return load_cached("clim_" + var + "_std"); }

    // --- normalization stats ---------------------------------------------------

    void write_stats(const std::map<std::string, std::pair<double, double>>& stats) {
        std::ofstream f(dir_ / "stats.txt");
        if (!f) throw std::runtime_error("archive: cannot write stats.txt");
        for (const auto& [var, ms] : stats)
            f << var << " " << grd1::fmt_g17(ms.first) << " " << grd1::fmt_g17(ms.second) << "\n";
    }

    std::map<std::string, std::pair<double, double>> read_stats() const {
        std::ifstream f(dir_ / "stats.txt");
        if (!f) throw std::runtime_error("archive: missing stats.txt (run preprocess first)");
        std::map<std::string, std::pair<double, double>> stats;
        std::string var;
        double m, s;
        while (f >> var >> m >> s) stats[var] = {m, s};
        return stats;
    }

  private:
    Grd1Meta base_meta(const std::string& var, const std::string& units, const std::string& role,
                       const std::string& source) const {
        Grd1Meta m;
        m.variable = var;
        m.units = units;
        m.role = role;
        m.source = source;
        m.n_lat = grid_.n_lat;
        m.n_lon = grid_.n_lon;
        m.lat = grid_.lat;
        m.lon = grid_.lon;
        return m;
    }

    void write_manifest() const {
        std::ofstream f(dir_ / "archive.txt");
        if (!f) throw std::runtime_error("archive: cannot write manifest");
        f << "droughtcast_archive 1\n";
        f << "grid " << grid_.n_lat << " " << grid_.n_lon << "\n";
        f << "lat";
        for (double v : grid_.lat) f << " " << grd1::fmt_g17(v);
        f << "\nlon";
        for (double v : grid_.lon) f << " " << grd1::fmt_g17(v);
        f << "\nyears";
        for (int y : years_) f << " " << y;
        f << "\n";
        f << "catalog_hash " << std::hex << catalog_hash_ << std::dec << "\n";
        f << prov_.to_line() << "\n";
    }

    FloatCube load_cached(const std::string& base) const {
        std::lock_guard<std::mutex> lock(*cache_mutex_);
        auto it = cache_.find(base);
        if (it != cache_.end()) return it->second;
        auto [meta, data] = grd1::read(dir_, base);
        if (meta.n_lat != grid_.n_lat || meta.n_lon != grid_.n_lon)
            throw std::runtime_error("archive: grid mismatch in " + base);
        if (cache_.size() >= kCacheCap) {
            // FIFO eviction keeps memory bounded on multi-decade archives;
            // shared ownership keeps handed-out cubes valid.
            cache_.erase(cache_.find(fifo_.front()));
            fifo_.pop_front();
        }
        fifo_.push_back(base);
        auto ptr = std::make_shared<const std::vector<float>>(std::move(data));
        return cache_.emplace(base, std::move(ptr)).first->second;
    }

    static constexpr std::size_t kCacheCap = 160;

    std::filesystem::path dir_;
    GridSpec grid_;
    std::vector<int> years_;
    Provenance prov_;
    std::uint64_t catalog_hash_ = 0;
    mutable std::unique_ptr<std::mutex> cache_mutex_ = std::make_unique<std::mutex>();
    mutable std::map<std::string, std::shared_ptr<const std::vector<float>>> cache_;
    mutable std::list<std::string> fifo_;
    mutable std::map<std::string, std::map<std::int64_t, double>> scalar_cache_;
};

}  // namespace droughtcast
