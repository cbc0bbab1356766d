#pragma once

// Regular lat-lon raster geometry with cosine-latitude area weights.

#include <cmath>
#include <stdexcept>
#include <vector>

namespace droughtcast {

struct GridSpec {
    int n_lat = 0;
    int n_lon = 0;
    std::vector<double> lat;  // degrees, uniform spacing, cell centers
    std::vector<double> lon;
    std::vector<double> row_weight;  // cos(lat) normalized to mean 1

    static GridSpec regular(int n_lat, int n_lon) {
        if (n_lat < 1 || n_lon < 1) throw std::invalid_argument("GridSpec: extents must be positive");
        GridSpec g;
        g.n_lat = n_lat;
        g.n_lon = n_lon;
        g.lat.resize(static_cast<std::size_t>(n_lat));
        g.lon.resize(static_cast<std::size_t>(n_lon));
        const double dlat = 180.0 / n_lat, dlon = 360.0 / n_lon;
        for (int i = 0; i < n_lat; ++i) g.lat[static_cast<std::size_t>(i)] = -90.0 + (i + 0.5) * dlat;
        for (int j = 0; j < n_lon; ++j) g.lon[static_cast<std::size_t>(j)] = -180.0 + (j + 0.5) * dlon;
        g.compute_weights();
        return g;
    }

    static GridSpec from_axes(std::vector<double> lat_vals, std::vector<double> lon_vals) {
        GridSpec g;
        g.n_lat = static_cast<int>(lat_vals.size());
        g.n_lon = static_cast<int>(lon_vals.size());
        g.lat = std::move(lat_vals);
        g.lon = std::move(lon_vals);
        if (g.n_lat < 1 || g.n_lon < 1) throw std::invalid_argument("GridSpec: empty axes");
        g.compute_weights();
        return g;
    }

    void compute_weights() {
        row_weight.resize(static_cast<std::size_t>(n_lat));
        double sum = 0.0;
        for (int i = 0; i < n_lat; ++i) {
            double w = std::cos(lat[static_cast<std::size_t>(i)] * M_PI / 180.0);
            if (w <= 0.0) throw std::invalid_argument("GridSpec: non-positive area weight (pole-centered row?)");
            row_weight[static_cast<std::size_t>(i)] = w;
            sum += w;
        }
        const double mean = sum / n_lat;
        for (auto& w : row_weight) w /= mean;
    }

    std::size_t cells() const { return static_cast<std::size_t>(n_lat) * static_cast<std::size_t>(n_lon); }

    // Per-cell weights (row weight repeated across longitudes), mean 1.
    std::vector<double> cell_weights() const {
        std::vector<double> w(cells());
        for (int i = 0; i < n_lat; ++i)
            for (int j = 0; j < n_lon; ++j)
                w[static_cast<std::size_t>(i * n_lon + j)] = row_weight[static_cast<std::size_t>(i)];
        return w;
    }

    friend bool operator==(const GridSpec& a, const GridSpec& b) {
        return a.n_lat == b.n_lat && a.n_lon == b.n_lon && a.lat == b.lat && a.lon == b.lon;
    }
};

// Area-weighted mean of a [n_lat*n_lon] field over an optional boolean mask.
inline double area_mean(const std::vector<double>& field, const GridSpec& grid,
                        const std::vector<bool>* mask = nullptr) {
    if (field.size() != grid.cells()) throw std::invalid_argument("area_mean: field size mismatch");
    double acc = 0.0, wsum = 0.0;
    for (int i = 0; i < grid.n_lat; ++i) {
        const double w = grid.row_weight[static_cast<std::size_t>(i)];
        for (int j = 0; j < grid.n_lon; ++j) {
            const std::size_t k = static_cast<std::size_t>(i * grid.n_lon + j);
            if (mask && !(*mask)[k]) continue;
            acc += w * field[k];
            wsum += w;
        }
    }
    if (wsum <= 0.0) throw std::invalid_argument("area_mean: empty mask");
    return acc / wsum;
}

}  // namespace droughtcast
