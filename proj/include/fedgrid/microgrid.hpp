#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Microgrid MDP: an RL-priced aggregator faces a set of prosumers that
// dispatch their batteries optimally against the better of the agent's and
// the utility's hourly prices; the step reward is the aggregator's profit.

namespace fedgrid::mg {

inline constexpr int kHoursPerDay = 24;
inline constexpr int kDaysPerYear = 365;
inline constexpr int kHoursPerYear = kHoursPerDay * kDaysPerYear; // 8760
inline constexpr int kStateDim = 120;                             // 5 x 24
inline constexpr int kActionDim = 48;                             // buy + sell prices

using HourVec = std::array<double, kHoursPerDay>;

// One building: hourly inflexible load and per-unit PV generation over a
// year, plus battery capacity C (kWh) and per-hour power limit P (kWh/h).
struct Prosumer {
    std::vector<double> load_profile;     // kWh per hour, length 8760
    std::vector<double> gen_profile;      // kWh per hour for one PV unit
    int pv_units = 0;
    double battery_capacity = 0.0;        // C
    double battery_power = 0.0;           // P, <= C

    void validate() const {
        if (load_profile.size() != kHoursPerYear || gen_profile.size() != kHoursPerYear)
            throw std::invalid_argument("prosumer: profiles must have 8760 hours");
        for (double v : load_profile)
            if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("prosumer: negative or non-finite load");
        for (double v : gen_profile)
            if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("prosumer: negative or non-finite generation");
        if (pv_units < 0) throw std::invalid_argument("prosumer: negative pv_units");
        if (battery_capacity < 0.0 || battery_power < 0.0)
            throw std::invalid_argument("prosumer: negative battery parameters");
        if (battery_power > battery_capacity)
            throw std::invalid_argument("prosumer: battery_power exceeds battery_capacity");
    }

    double load_at(int day, int hour) const {
        return load_profile[static_cast<std::size_t>(day) * kHoursPerDay + hour];
    }
    double generation_at(int day, int hour) const {
        return pv_units * gen_profile[static_cast<std::size_t>(day) * kHoursPerDay + hour];
    }
};

// A day's worth of hourly buy and sell prices, $/kWh.
struct PriceDay {
    HourVec buy{};
    HourVec sell{};

    void validate() const {
        for (int h = 0; h < kHoursPerDay; ++h)
            if (!(buy[h] >= 0.0) || !(sell[h] >= 0.0) || !std::isfinite(buy[h]) || !std::isfinite(sell[h]))
                throw std::invalid_argument("price day: entries must be finite and >= 0");
    }
};

// MDP state: (U_s, U_b, solar forecast, previous-day bought, previous-day
// sold), concatenated to exactly 120 reals.
struct EnvState {
    HourVec utility_sell{};
    HourVec utility_buy{};
    HourVec solar_forecast{};
    HourVec prev_bought{};
    HourVec prev_sold{};

    std::array<double, kStateDim> to_vector() const {
        std::array<double, kStateDim> v{};
        std::size_t i = 0;
        for (double x : utility_sell) v[i++] = x;
        for (double x : utility_buy) v[i++] = x;
        for (double x : solar_forecast) v[i++] = x;
        for (double x : prev_bought) v[i++] = x;
        for (double x : prev_sold) v[i++] = x;
        return v;
    }
};

// Battery dispatch for one day. charge/discharge are mutually exclusive per
// hour; soc has 25 entries with soc[h+1] = soc[h] + charge[h] - discharge[h].
struct BatterySchedule {
    HourVec discharge{};                      // u_+
    HourVec charge{};                         // u_-
    std::array<double, kHoursPerDay + 1> soc{};
};

struct StepOutcome {
    EnvState next_state;
    double reward = 0.0;          // $
    HourVec bought_from_agent{};  // E_b
    HourVec sold_to_agent{};      // E_s
    double utility_imbalance_cost = 0.0; // diagnostic only
};

// Per-hour best price from the prosumer's point of view: it sells at the
// higher of the two sell prices and buys at the lower of the two buy prices.
inline PriceDay effective_prices(const PriceDay& agent, const PriceDay& utility) {
    PriceDay e;
    for (int h = 0; h < kHoursPerDay; ++h) {
        e.sell[h] = std::max(agent.sell[h], utility.sell[h]);
        e.buy[h] = std::min(agent.buy[h], utility.buy[h]);
    }
    return e;
}

// ---------------------------------------------------------------------------
// Battery dispatch: dynamic programming over a discretized SoC grid, exact
// for the discretized problem. Generic over horizon so the same core drives
// both the 24-hour environment and short randomized test instances.

struct DispatchProblem {
    std::vector<double> sell;   // effective sell price per hour
    std::vector<double> buy;    // effective buy price per hour
    double capacity = 0.0;      // C
    double power = 0.0;         // P
    double soc_start = 0.0;
    int grid_levels = 101;
};

struct DispatchResult {
    std::vector<double> charge;
    std::vector<double> discharge;
    std::vector<double> soc;      // horizon + 1 entries
    double battery_value = 0.0;   // sum(sell*discharge) - sum(buy*charge)
};

// Maximizes sum_h sell[h]*discharge[h] - buy[h]*charge[h] subject to the
// SoC and power constraints. Ties resolve to the lexicographically smallest
// (discharge, charge) sequence, so doing nothing always wins a tie.
inline DispatchResult optimize_dispatch(const DispatchProblem& pr) {
    const int horizon = static_cast<int>(pr.sell.size());
    if (pr.buy.size() != pr.sell.size())
        throw std::invalid_argument("dispatch: sell/buy horizon mismatch");
    if (pr.grid_levels < 1) throw std::invalid_argument("dispatch: grid_levels must be >= 1");
    if (!(pr.soc_start >= 0.0) || pr.soc_start > pr.capacity + 1e-12)
        throw std::invalid_argument("dispatch: soc_start outside [0, capacity]");

    DispatchResult res;
    res.charge.assign(horizon, 0.0);
    res.discharge.assign(horizon, 0.0);
    res.soc.assign(horizon + 1, pr.soc_start);
    if (pr.capacity <= 0.0 || pr.power <= 0.0 || pr.grid_levels < 2) return res;

    const int levels = pr.grid_levels;
    const double step = pr.capacity / (levels - 1);
    // largest level jump the power limit allows (epsilon guards FP division)
    const int max_jump = std::min(levels - 1, static_cast<int>(std::floor(pr.power / step + 1e-9)));
    if (max_jump == 0) return res; // grid too coarse for this battery

    auto level_soc = [&](int i) { return step * i; };
    const int start_level = static_cast<int>(std::llround(pr.soc_start / step));

    // value[h][i]: best achievable battery value from hour h at level i
    std::vector<std::vector<double>> value(static_cast<std::size_t>(horizon) + 1,
                                           std::vector<double>(static_cast<std::size_t>(levels), 0.0));
    auto transition = [&](int h, int i, int j) {
        if (j > i) return -pr.buy[static_cast<std::size_t>(h)] * step * (j - i);   // charging
        if (j < i) return pr.sell[static_cast<std::size_t>(h)] * step * (i - j);   // discharging
        return 0.0;
    };
    for (int h = horizon - 1; h >= 0; --h) {
        for (int i = 0; i < levels; ++i) {
            const int jlo = std::max(0, i - max_jump);
            const int jhi = std::min(levels - 1, i + max_jump);
            double best = -std::numeric_limits<double>::infinity();
            for (int j = jlo; j <= jhi; ++j)
                best = std::max(best, transition(h, i, j) + value[static_cast<std::size_t>(h) + 1][static_cast<std::size_t>(j)]);
            value[static_cast<std::size_t>(h)][static_cast<std::size_t>(i)] = best;
        }
    }

    // Forward pass; at each hour scan candidates in lexicographic preference
    // order (hold, then smallest charge, then smallest discharge) and keep
    // the first one achieving the optimal value-to-go.
    int cur = start_level;
    for (int h = 0; h < horizon; ++h) {
        const double target = value[static_cast<std::size_t>(h)][static_cast<std::size_t>(cur)];
        int chosen = -1;
        auto consider = [&](int j) {
            if (chosen >= 0 || j < 0 || j >= levels || std::abs(j - cur) > max_jump) return;
            if (transition(h, cur, j) + value[static_cast<std::size_t>(h) + 1][static_cast<std::size_t>(j)] == target)
                chosen = j;
        };
        consider(cur);
        for (int d = 1; d <= max_jump && chosen < 0; ++d) consider(cur + d);
        for (int d = 1; d <= max_jump && chosen < 0; ++d) consider(cur - d);
        if (chosen < 0) throw std::logic_error("dispatch: forward pass lost the optimal path");
        if (chosen > cur) {
            res.charge[static_cast<std::size_t>(h)] = step * (chosen - cur);
            res.battery_value -= pr.buy[static_cast<std::size_t>(h)] * res.charge[static_cast<std::size_t>(h)];
        } else if (chosen < cur) {
            res.discharge[static_cast<std::size_t>(h)] = step * (cur - chosen);
            res.battery_value += pr.sell[static_cast<std::size_t>(h)] * res.discharge[static_cast<std::size_t>(h)];
        }
        cur = chosen;
        res.soc[static_cast<std::size_t>(h) + 1] = level_soc(cur);
    }
    res.soc[0] = level_soc(start_level);
    return res;
}

// Solves the prosumer's daily battery problem against effective prices.
// Inflexible flows do not depend on the schedule, so the battery terms are
// the only ones optimized; the full objective is battery value plus
// <sell, e_s> - <buy, e_b>.
inline BatterySchedule prosumer_optimize(const PriceDay& prices, const Prosumer& p, int day,
                                         double soc_start, int grid_levels = 101) {
    if (day < 0 || day >= kDaysPerYear)
        throw std::invalid_argument("prosumer_optimize: day outside [0, 364]");
    if (!(soc_start >= 0.0) || soc_start > p.battery_capacity + 1e-12)
        throw std::invalid_argument("prosumer_optimize: soc_start outside [0, C]");

    DispatchProblem dp;
    dp.sell.assign(prices.sell.begin(), prices.sell.end());
    dp.buy.assign(prices.buy.begin(), prices.buy.end());
    dp.capacity = p.battery_capacity;
    dp.power = p.battery_power;
    dp.soc_start = soc_start;
    dp.grid_levels = grid_levels;
    const DispatchResult r = optimize_dispatch(dp);

    BatterySchedule s;
    for (int h = 0; h < kHoursPerDay; ++h) {
        s.charge[h] = r.charge[static_cast<std::size_t>(h)];
        s.discharge[h] = r.discharge[static_cast<std::size_t>(h)];
        s.soc[h] = r.soc[static_cast<std::size_t>(h)];
    }
    s.soc[kHoursPerDay] = r.soc[kHoursPerDay];
    return s;
}

// Daily profit of a prosumer under the given prices and schedule.
inline double schedule_objective(const PriceDay& prices, const Prosumer& p, int day,
                                 const BatterySchedule& s) {
    double obj = 0.0;
    for (int h = 0; h < kHoursPerDay; ++h) {
        obj += prices.sell[h] * (p.generation_at(day, h) + s.discharge[h]);
        obj -= prices.buy[h] * (p.load_at(day, h) + s.charge[h]);
    }
    return obj;
}

// Raw policy outputs map through a sigmoid to [0, price_cap]; first 24
// entries are buy prices, last 24 sell prices.
inline PriceDay action_to_prices(std::span<const double> raw, double price_cap) {
    if (raw.size() != kActionDim)
        throw std::invalid_argument("action_to_prices: expected 48 entries");
    auto squash = [price_cap](double x) { return price_cap / (1.0 + std::exp(-x)); };
    PriceDay day;
    for (int h = 0; h < kHoursPerDay; ++h) {
        day.buy[h] = squash(raw[static_cast<std::size_t>(h)]);
        day.sell[h] = squash(raw[static_cast<std::size_t>(h) + kHoursPerDay]);
    }
    return day;
}

struct EnvConfig {
    int soc_grid = 101;           // SoC discretization levels
    bool soc_carry_over = false;  // keep end-of-day charge for the next day
    double price_cap = 0.0;       // 0 -> 2 * max utility buy price
    std::uint64_t horizon_days = std::numeric_limits<std::uint64_t>::max();
};

class MicrogridEnv {
public:
    MicrogridEnv() = default;

    MicrogridEnv(std::vector<Prosumer> prosumers, PriceDay utility, EnvConfig cfg = {})
        : prosumers_(std::move(prosumers)), utility_(utility), cfg_(cfg) {
        utility_.validate();
        for (const auto& p : prosumers_) p.validate();
        if (cfg_.soc_grid < 1) throw std::invalid_argument("env: soc_grid must be >= 1");
        if (cfg_.price_cap <= 0.0)
            cfg_.price_cap = 2.0 * *std::max_element(utility_.buy.begin(), utility_.buy.end());
        soc_.assign(prosumers_.size(), 0.0);
        reset(0);
    }

    EnvState reset(int day0) {
        if (day0 < 0) throw std::invalid_argument("env: negative day index");
        day_ = day0 % kDaysPerYear;
        steps_ = 0;
        std::fill(soc_.begin(), soc_.end(), 0.0);
        prev_bought_.fill(0.0);
        prev_sold_.fill(0.0);
        return state();
    }

    EnvState state() const {
        EnvState s;
        s.utility_sell = utility_.sell;
        s.utility_buy = utility_.buy;
        for (int h = 0; h < kHoursPerDay; ++h) {
            double g = 0.0;
            for (const auto& p : prosumers_) g += p.generation_at(day_, h);
            s.solar_forecast[h] = g;
        }
        s.prev_bought = prev_bought_;
        s.prev_sold = prev_sold_;
        return s;
    }

    // One simulated day under the agent's prices. Quantities route to the
    // agent only at hours where its price is strictly better than the
    // utility's; ties go to the utility.
    StepOutcome step(const PriceDay& agent_prices) {
        agent_prices.validate();
        return step_impl(agent_prices, RoutingMode::StrictlyBetter);
    }

    // Baseline without RL control: the agent mirrors the utility's prices
    // and each prosumer settles half of every hourly quantity with it.
    StepOutcome no_rl_step() { return step_impl(utility_, RoutingMode::HalfSplit); }

    const std::vector<Prosumer>& prosumers() const { return prosumers_; }
    const PriceDay& utility_prices() const { return utility_; }
    const EnvConfig& config() const { return cfg_; }
    int day() const { return day_; }
    std::uint64_t steps_taken() const { return steps_; }
    double soc_of(std::size_t i) const { return soc_.at(i); }
    double price_cap() const { return cfg_.price_cap; }

    PriceDay prices_from_action(std::span<const double> raw) const {
        return action_to_prices(raw, cfg_.price_cap);
    }

    void clear_horizon() { cfg_.horizon_days = std::numeric_limits<std::uint64_t>::max(); }

private:
    enum class RoutingMode { StrictlyBetter, HalfSplit };

    StepOutcome step_impl(const PriceDay& agent, RoutingMode mode) {
        if (steps_ >= cfg_.horizon_days)
            throw std::runtime_error("env: stepping past configured horizon");
        const PriceDay eff = effective_prices(agent, utility_);

        StepOutcome out;
        for (std::size_t i = 0; i < prosumers_.size(); ++i) {
            const Prosumer& p = prosumers_[i];
            const double soc0 = cfg_.soc_carry_over ? soc_[i] : 0.0;
            const BatterySchedule sched = prosumer_optimize(eff, p, day_, soc0, cfg_.soc_grid);
            if (cfg_.soc_carry_over) soc_[i] = sched.soc[kHoursPerDay];
            for (int h = 0; h < kHoursPerDay; ++h) {
                const double sell_qty = p.generation_at(day_, h) + sched.discharge[h];
                const double buy_qty = p.load_at(day_, h) + sched.charge[h];
                if (mode == RoutingMode::HalfSplit) {
                    out.sold_to_agent[h] += 0.5 * sell_qty;
                    out.bought_from_agent[h] += 0.5 * buy_qty;
                } else {
                    if (agent.sell[h] > utility_.sell[h]) out.sold_to_agent[h] += sell_qty;
                    if (agent.buy[h] < utility_.buy[h]) out.bought_from_agent[h] += buy_qty;
                }
            }
        }

        double reward = 0.0;
        double imbalance = 0.0;
        for (int h = 0; h < kHoursPerDay; ++h) {
            reward += agent.buy[h] * out.bought_from_agent[h];
            reward -= agent.sell[h] * out.sold_to_agent[h];
            // the aggregator settles its hourly net position with the utility
            const double deficit = out.bought_from_agent[h] - out.sold_to_agent[h];
            if (deficit > 0.0)
                imbalance += utility_.buy[h] * deficit;
            else
                imbalance -= utility_.sell[h] * (-deficit);
        }
        out.reward = reward;
        out.utility_imbalance_cost = imbalance;

        prev_bought_ = out.bought_from_agent;
        prev_sold_ = out.sold_to_agent;
        day_ = (day_ + 1) % kDaysPerYear;
        ++steps_;
        out.next_state = state();
        return out;
    }

    std::vector<Prosumer> prosumers_;
    PriceDay utility_;
    EnvConfig cfg_;
    int day_ = 0;
    std::uint64_t steps_ = 0;
    std::vector<double> soc_;
    HourVec prev_bought_{};
    HourVec prev_sold_{};
};

// ---------------------------------------------------------------------------
// Profile CSV: header `hour,load_kwh,gen_kwh_per_unit`, 8760 data rows.

struct YearProfiles {
    std::vector<double> load;
    std::vector<double> gen_unit;
};

inline YearProfiles load_profile_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("profile csv: cannot open " + path);

    auto fail = [&](std::size_t line, const std::string& why) {
        throw std::runtime_error("profile csv: " + path + ":" + std::to_string(line) + ": " + why);
    };

    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) fail(lineno, "missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "hour,load_kwh,gen_kwh_per_unit")
        fail(lineno, "bad header, expected hour,load_kwh,gen_kwh_per_unit");

    YearProfiles out;
    out.load.reserve(kHoursPerYear);
    out.gen_unit.reserve(kHoursPerYear);
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) fail(lineno, "empty row");
        std::istringstream ss(line);
        std::string hour_s, load_s, gen_s, extra;
        if (!std::getline(ss, hour_s, ',') || !std::getline(ss, load_s, ',') || !std::getline(ss, gen_s, ','))
            fail(lineno, "expected 3 comma-separated fields");
        if (std::getline(ss, extra, ',')) fail(lineno, "too many fields");
        try {
            std::size_t pos = 0;
            const long hour = std::stol(hour_s, &pos);
            if (pos != hour_s.size()) throw std::invalid_argument("trailing");
            if (hour != static_cast<long>(out.load.size()))
                fail(lineno, "hour index out of sequence");
            pos = 0;
            const double load = std::stod(load_s, &pos);
            if (pos != load_s.size()) throw std::invalid_argument("trailing");
            pos = 0;
            const double gen = std::stod(gen_s, &pos);
            if (pos != gen_s.size()) throw std::invalid_argument("trailing");
            if (load < 0.0 || gen < 0.0) fail(lineno, "negative value");
            if (!std::isfinite(load) || !std::isfinite(gen)) fail(lineno, "non-finite value");
            out.load.push_back(load);
            out.gen_unit.push_back(gen);
        } catch (const std::logic_error&) {
            fail(lineno, "unparseable numeric field");
        }
        if (out.load.size() > kHoursPerYear) fail(lineno, "more than 8760 data rows");
    }
    if (out.load.size() != kHoursPerYear)
        throw std::runtime_error("profile csv: " + path + ": expected 8760 data rows, got " +
                                 std::to_string(out.load.size()));
    return out;
}

} // namespace fedgrid::mg
