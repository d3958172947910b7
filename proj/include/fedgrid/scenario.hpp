#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedgrid/microgrid.hpp"
#include "fedgrid/rng.hpp"

// Cluster construction: diversity-controlled sampling of prosumer
// capacities, synthetic year profiles, and utility price schedules.

namespace fedgrid::scenario {

struct DiversitySpec {
    double mu = 100.0;
    double sigma = 10.0;  // 10 low, 30 medium, 50 high diversity
    int n_prosumers = 4;
    int n_microgrids = 1;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(sigma > 0.0)) throw std::invalid_argument("diversity: sigma must be > 0");
        if (n_prosumers < 1 || n_microgrids < 1)
            throw std::invalid_argument("diversity: counts must be >= 1");
    }
};

struct UtilitySchedule {
    std::array<double, mg::kHoursPerDay> buy{};
    std::array<double, mg::kHoursPerDay> sell{};

    void validate() const {
        for (int h = 0; h < mg::kHoursPerDay; ++h) {
            if (!(buy[h] >= 0.0) || !(sell[h] >= 0.0))
                throw std::invalid_argument("utility schedule: prices must be >= 0");
            if (sell[h] > buy[h])
                throw std::invalid_argument("utility schedule: sell price exceeds buy price at hour " +
                                            std::to_string(h));
        }
    }

    mg::PriceDay to_price_day() const { return mg::PriceDay{buy, sell}; }

    // Time-of-use default: expensive evening peak, flat feed-in price.
    static UtilitySchedule default_tou(double buy_peak = 0.30, double buy_offpeak = 0.15,
                                       double sell_flat = 0.05, int peak_start = 16, int peak_end = 21) {
        UtilitySchedule s;
        for (int h = 0; h < mg::kHoursPerDay; ++h) {
            s.buy[h] = (h >= peak_start && h <= peak_end) ? buy_peak : buy_offpeak;
            s.sell[h] = sell_flat;
        }
        s.validate();
        return s;
    }
};

struct Capacity {
    int pv_units = 0;
    int battery_capacity = 0; // kWh
};

// Field tags for the documented seed-splitting scheme
// hash(root_seed, microgrid_idx, prosumer_idx, field_tag).
inline constexpr std::uint64_t kFieldPv = 0x70;
inline constexpr std::uint64_t kFieldBattery = 0xba;
inline constexpr std::uint64_t kFieldProfile = 0x10ad;
inline constexpr std::uint64_t kFieldMicrogrid = 0x316;

// Independent draws from Normal(mu, sigma), truncated at 0 and rounded to
// the nearest integer. Each (prosumer, field) pair gets its own derived
// stream, so draws are stable under changes to the list length.
inline std::vector<Capacity> sample_capacities(const DiversitySpec& spec) {
    spec.validate();
    auto draw = [&](std::uint64_t stream_seed) {
        rng::Stream s(stream_seed);
        const double x = std::max(0.0, spec.mu + spec.sigma * s.normal());
        return static_cast<int>(std::llround(x));
    };
    std::vector<Capacity> out;
    out.reserve(static_cast<std::size_t>(spec.n_prosumers));
    for (int i = 0; i < spec.n_prosumers; ++i) {
        Capacity c;
        c.pv_units = draw(rng::derive_seed(spec.seed, {static_cast<std::uint64_t>(i), kFieldPv}));
        c.battery_capacity = draw(rng::derive_seed(spec.seed, {static_cast<std::uint64_t>(i), kFieldBattery}));
        out.push_back(c);
    }
    return out;
}

// Synthetic year profiles. Load: base plus morning and evening peaks plus
// seeded noise, never negative. Generation: clipped sinusoid peaking midday,
// zero at night, seasonal modulation, 1 kWh peak per PV unit.
inline mg::YearProfiles synth_profiles(std::uint64_t seed, double scale) {
    if (!(scale > 0.0)) throw std::invalid_argument("synth_profiles: scale must be > 0");
    mg::YearProfiles out;
    out.load.resize(mg::kHoursPerYear);
    out.gen_unit.resize(mg::kHoursPerYear);
    rng::Stream noise(rng::derive_seed(seed, {0x5e1f}));
    constexpr double pi = 3.14159265358979323846;
    for (int day = 0; day < mg::kDaysPerYear; ++day) {
        // mild seasonal swing, unity at the summer peak
        const double season = 0.75 + 0.25 * std::sin(2.0 * pi * (day - 80) / 365.0);
        for (int h = 0; h < mg::kHoursPerDay; ++h) {
            const std::size_t idx = static_cast<std::size_t>(day) * mg::kHoursPerDay + h;

            double load = 0.55;
            load += 0.65 * std::exp(-0.5 * std::pow((h - 8.0) / 1.6, 2.0));  // morning
            load += 0.95 * std::exp(-0.5 * std::pow((h - 19.0) / 2.1, 2.0)); // evening
            load *= scale;
            load += 0.05 * scale * noise.normal();
            out.load[idx] = std::max(0.0, load);

            double gen = 0.0;
            if (h > 6 && h < 18) gen = season * std::sin(pi * (h - 6) / 12.0);
            out.gen_unit[idx] = std::max(0.0, gen);
        }
    }
    return out;
}

struct ProfileSource {
    enum class Kind { Synth, Csv } kind = Kind::Synth;
    double scale = 100.0;      // synth load magnitude, kWh/h per building
    std::string csv_path;      // shared by all prosumers when kind == Csv
};

// Builds n_microgrids environments, each with n_prosumers prosumers whose
// capacities come from the diversity distribution. Per-microgrid seed
// substreams are disjoint, so adding a microgrid never perturbs earlier ones.
inline std::vector<mg::MicrogridEnv> build_cluster(const DiversitySpec& spec,
                                                   const UtilitySchedule& schedule,
                                                   const ProfileSource& source,
                                                   const mg::EnvConfig& env_cfg = {}) {
    spec.validate();
    schedule.validate();

    mg::YearProfiles shared;
    if (source.kind == ProfileSource::Kind::Csv) shared = mg::load_profile_csv(source.csv_path);

    std::vector<mg::MicrogridEnv> envs;
    envs.reserve(static_cast<std::size_t>(spec.n_microgrids));
    for (int g = 0; g < spec.n_microgrids; ++g) {
        DiversitySpec sub = spec;
        sub.seed = rng::derive_seed(spec.seed, {static_cast<std::uint64_t>(g), kFieldMicrogrid});
        sub.n_microgrids = 1;
        const auto caps = sample_capacities(sub);

        std::vector<mg::Prosumer> prosumers;
        prosumers.reserve(caps.size());
        for (int i = 0; i < spec.n_prosumers; ++i) {
            mg::Prosumer p;
            if (source.kind == ProfileSource::Kind::Csv) {
                p.load_profile = shared.load;
                p.gen_profile = shared.gen_unit;
            } else {
                const auto prof = synth_profiles(
                    rng::derive_seed(spec.seed, {static_cast<std::uint64_t>(g),
                                                 static_cast<std::uint64_t>(i), kFieldProfile}),
                    source.scale);
                p.load_profile = prof.load;
                p.gen_profile = prof.gen_unit;
            }
            p.pv_units = caps[static_cast<std::size_t>(i)].pv_units;
            p.battery_capacity = caps[static_cast<std::size_t>(i)].battery_capacity;
            p.battery_power = p.battery_capacity / 4.0; // 4-hour battery
            prosumers.push_back(std::move(p));
        }
        envs.emplace_back(std::move(prosumers), schedule.to_price_day(), env_cfg);
    }
    return envs;
}

} // namespace fedgrid::scenario
