#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fedgrid/microgrid.hpp"
#include "fedgrid/rng.hpp"

using namespace fedgrid;

namespace {

mg::Prosumer flat_prosumer(double load, double gen_unit, int pv, double cap, double power) {
    mg::Prosumer p;
    p.load_profile.assign(mg::kHoursPerYear, load);
    p.gen_profile.assign(mg::kHoursPerYear, gen_unit);
    p.pv_units = pv;
    p.battery_capacity = cap;
    p.battery_power = power;
    return p;
}

mg::PriceDay flat_prices(double buy, double sell) {
    mg::PriceDay d;
    d.buy.fill(buy);
    d.sell.fill(sell);
    return d;
}

// Exhaustive-enumeration oracle over all SoC level paths; independent of the
// DP implementation.
double enumerate_best_value(const std::vector<double>& sell, const std::vector<double>& buy,
                            int levels, double step, int max_jump, int cur, std::size_t hour) {
    if (hour == sell.size()) return 0.0;
    double best = -1e300;
    for (int j = std::max(0, cur - max_jump); j <= std::min(levels - 1, cur + max_jump); ++j) {
        double v = 0.0;
        if (j > cur) v = -buy[hour] * step * (j - cur);
        if (j < cur) v = sell[hour] * step * (cur - j);
        v += enumerate_best_value(sell, buy, levels, step, max_jump, j, hour + 1);
        best = std::max(best, v);
    }
    return best;
}

} // namespace

TEST_CASE("effective prices take the prosumer-favorable side") {
    mg::PriceDay utility = flat_prices(0.3, 0.2);
    SECTION("identical prices pass through") {
        const auto e = mg::effective_prices(utility, utility);
        CHECK(e.buy == utility.buy);
        CHECK(e.sell == utility.sell);
    }
    SECTION("sell takes the max") {
        mg::PriceDay agent = flat_prices(0.3, 0.2);
        agent.sell[5] = 0.5;
        utility.sell[5] = 0.2;
        CHECK(mg::effective_prices(agent, utility).sell[5] == 0.5);
    }
    SECTION("buy takes the min") {
        mg::PriceDay agent = flat_prices(0.4, 0.1);
        utility.buy[7] = 0.3;
        CHECK(mg::effective_prices(agent, utility).buy[7] == 0.3);
    }
}

TEST_CASE("prosumer with no battery does nothing") {
    const auto p = flat_prosumer(2.0, 0.5, 2, 0.0, 0.0);
    const auto prices = flat_prices(0.3, 0.1);
    const auto s = mg::prosumer_optimize(prices, p, 0, 0.0);
    for (int h = 0; h < 24; ++h) {
        CHECK(s.charge[h] == 0.0);
        CHECK(s.discharge[h] == 0.0);
    }
    // objective reduces to <sell, e_s> - <buy, e_b>
    const double obj = mg::schedule_objective(prices, p, 0, s);
    CHECK(obj == Catch::Approx(24 * (0.1 * 1.0 - 0.3 * 2.0)).epsilon(1e-12));
}

TEST_CASE("flat prices with buy >= sell: all-zero schedule is chosen") {
    const auto p = flat_prosumer(1.0, 0.0, 0, 10.0, 2.5);
    SECTION("strict spread") {
        const auto s = mg::prosumer_optimize(flat_prices(0.3, 0.1), p, 0, 0.0);
        for (int h = 0; h < 24; ++h) CHECK(s.charge[h] + s.discharge[h] == 0.0);
    }
    SECTION("buy == sell ties break to the zero schedule") {
        const auto s = mg::prosumer_optimize(flat_prices(0.2, 0.2), p, 0, 0.0);
        for (int h = 0; h < 24; ++h) CHECK(s.charge[h] + s.discharge[h] == 0.0);
        for (int h = 0; h <= 24; ++h) CHECK(s.soc[h] == 0.0);
    }
}

TEST_CASE("two-hour arbitrage example: charge at 1, sell at 5, profit 4") {
    auto p = flat_prosumer(0.0, 0.0, 0, 1.0, 1.0);
    mg::PriceDay prices = flat_prices(1.0, 0.5);
    prices.sell[1] = 5.0;
    const auto s = mg::prosumer_optimize(prices, p, 0, 0.0);
    CHECK(s.charge[0] == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(s.discharge[1] == Catch::Approx(1.0).epsilon(1e-12));
    for (int h = 2; h < 24; ++h) CHECK(s.charge[h] + s.discharge[h] == 0.0);
    const double obj = mg::schedule_objective(prices, p, 0, s);
    CHECK(obj == Catch::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("dispatch DP equals exhaustive enumeration on small instances") {
    rng::Stream s(20240601);
    for (int trial = 0; trial < 60; ++trial) {
        const int horizon = 2 + static_cast<int>(s.next_below(5));   // 2..6 hours
        const int levels = 2 + static_cast<int>(s.next_below(10));   // 2..11 levels
        mg::DispatchProblem pr;
        pr.capacity = s.uniform(0.5, 8.0);
        pr.power = pr.capacity * s.uniform(0.2, 1.0);
        pr.grid_levels = levels;
        const double step = pr.capacity / (levels - 1);
        pr.soc_start = step * static_cast<double>(s.next_below(static_cast<std::uint64_t>(levels)));
        for (int h = 0; h < horizon; ++h) {
            pr.buy.push_back(s.uniform(0.0, 2.0));
            pr.sell.push_back(s.uniform(0.0, 3.0)); // sell can exceed buy
        }
        const auto res = mg::optimize_dispatch(pr);
        const int max_jump = std::min(levels - 1, static_cast<int>(std::floor(pr.power / step + 1e-9)));
        const int start_level = static_cast<int>(std::llround(pr.soc_start / step));
        const double oracle =
            enumerate_best_value(pr.sell, pr.buy, levels, step, max_jump, start_level, 0);
        CHECK(std::abs(res.battery_value - oracle) <= 1e-9);
    }
}

TEST_CASE("dispatch invariants on random instances") {
    rng::Stream s(777);
    for (int trial = 0; trial < 40; ++trial) {
        mg::Prosumer p = flat_prosumer(s.uniform(0, 3), s.uniform(0, 1), 1, s.uniform(0, 12),
                                       0.0);
        p.battery_power = p.battery_capacity * s.uniform(0.0, 1.0);
        mg::PriceDay prices;
        for (int h = 0; h < 24; ++h) {
            prices.buy[h] = s.uniform(0.0, 1.0);
            prices.sell[h] = s.uniform(0.0, 1.5);
        }
        const auto sched = mg::prosumer_optimize(prices, p, 0, 0.0, 31);

        // exclusivity and SoC bounds
        for (int h = 0; h < 24; ++h) {
            CHECK(sched.charge[h] * sched.discharge[h] == 0.0);
            CHECK(sched.charge[h] <= p.battery_power + 1e-12);
            CHECK(sched.discharge[h] <= p.battery_power + 1e-12);
            CHECK(sched.soc[h] >= -1e-12);
            CHECK(sched.soc[h] <= p.battery_capacity + 1e-12);
            CHECK(sched.soc[h + 1] ==
                  Catch::Approx(sched.soc[h] + sched.charge[h] - sched.discharge[h]).margin(1e-9));
        }

        // dominance over the zero schedule
        mg::BatterySchedule zero{};
        CHECK(mg::schedule_objective(prices, p, 0, sched) >=
              mg::schedule_objective(prices, p, 0, zero) - 1e-9);

        // raising one hour's sell price never lowers the optimum
        mg::PriceDay bumped = prices;
        const int h = static_cast<int>(s.next_below(24));
        bumped.sell[h] += s.uniform(0.0, 1.0);
        const auto sched2 = mg::prosumer_optimize(bumped, p, 0, 0.0, 31);
        CHECK(mg::schedule_objective(bumped, p, 0, sched2) >=
              mg::schedule_objective(prices, p, 0, sched) - 1e-9);
    }
}

TEST_CASE("prosumer_optimize rejects bad arguments") {
    const auto p = flat_prosumer(1.0, 0.0, 0, 4.0, 1.0);
    CHECK_THROWS_AS(mg::prosumer_optimize(flat_prices(0.2, 0.1), p, 0, -0.5), std::invalid_argument);
    CHECK_THROWS_AS(mg::prosumer_optimize(flat_prices(0.2, 0.1), p, 0, 5.0), std::invalid_argument);
    CHECK_THROWS_AS(mg::prosumer_optimize(flat_prices(0.2, 0.1), p, 365, 0.0), std::invalid_argument);
}

TEST_CASE("env_step routing and reward bookkeeping") {
    const auto utility = flat_prices(0.2, 0.1);
    SECTION("agent prices equal to utility: ties go to the utility, reward 0") {
        mg::MicrogridEnv env({flat_prosumer(2.0, 0.5, 2, 0.0, 0.0)}, utility);
        const auto out = env.step(utility);
        CHECK(out.reward == 0.0);
        for (int h = 0; h < 24; ++h) {
            CHECK(out.bought_from_agent[h] == 0.0);
            CHECK(out.sold_to_agent[h] == 0.0);
        }
    }
    SECTION("single batteryless prosumer, agent undercuts buy price") {
        mg::MicrogridEnv env({flat_prosumer(2.0, 0.5, 2, 0.0, 0.0)}, utility);
        const auto agent = flat_prices(0.15, 0.05); // A_b < U_b, A_s < U_s
        const auto out = env.step(agent);
        for (int h = 0; h < 24; ++h) {
            CHECK(out.bought_from_agent[h] == 2.0); // whole load
            CHECK(out.sold_to_agent[h] == 0.0);
        }
        CHECK(out.reward == Catch::Approx(24 * 0.15 * 2.0).epsilon(1e-12));
    }
    SECTION("reward equals the Eq-style recomputation from outcome fields exactly") {
        mg::MicrogridEnv env({flat_prosumer(2.0, 0.5, 3, 8.0, 2.0), flat_prosumer(1.0, 0.3, 1, 4.0, 1.0)},
                             utility);
        mg::PriceDay agent;
        rng::Stream s(99);
        for (int h = 0; h < 24; ++h) {
            agent.buy[h] = s.uniform(0.0, 0.4);
            agent.sell[h] = s.uniform(0.0, 0.3);
        }
        const auto out = env.step(agent);
        double recomputed = 0.0;
        for (int h = 0; h < 24; ++h)
            recomputed += agent.buy[h] * out.bought_from_agent[h] - agent.sell[h] * out.sold_to_agent[h];
        CHECK(out.reward == recomputed); // bit-exact bookkeeping identity
    }
}

TEST_CASE("money conservation between agent and prosumers over a fuzz run") {
    const auto utility = flat_prices(0.25, 0.06);
    std::vector<mg::Prosumer> prosumers{flat_prosumer(2.0, 0.5, 3, 8.0, 2.0),
                                        flat_prosumer(1.5, 0.4, 2, 6.0, 1.5),
                                        flat_prosumer(0.8, 0.2, 5, 0.0, 0.0)};
    mg::MicrogridEnv env(prosumers, utility);
    rng::Stream s(4242);
    for (int day = 0; day < 50; ++day) {
        mg::PriceDay agent;
        for (int h = 0; h < 24; ++h) {
            agent.buy[h] = s.uniform(0.0, 0.5);
            agent.sell[h] = s.uniform(0.0, 0.4);
        }
        const int env_day = env.day();
        const auto out = env.step(agent);

        // independent route: per-prosumer payments to the agent
        const auto eff = mg::effective_prices(agent, utility);
        double payments = 0.0;
        for (const auto& p : prosumers) {
            const auto sched = mg::prosumer_optimize(eff, p, env_day, 0.0, env.config().soc_grid);
            for (int h = 0; h < 24; ++h) {
                if (agent.buy[h] < utility.buy[h])
                    payments += agent.buy[h] * (p.load_at(env_day, h) + sched.charge[h]);
                if (agent.sell[h] > utility.sell[h])
                    payments -= agent.sell[h] * (p.generation_at(env_day, h) + sched.discharge[h]);
            }
        }
        CHECK(std::abs(out.reward - payments) <= 1e-9);
    }
}

TEST_CASE("env reset semantics") {
    mg::MicrogridEnv env({flat_prosumer(1.0, 0.5, 2, 4.0, 1.0)}, flat_prices(0.2, 0.1));
    const auto s1 = env.reset(3);
    env.step(flat_prices(0.1, 0.05));
    const auto s2 = env.reset(3);
    CHECK(s1.to_vector() == s2.to_vector());
    CHECK(s1.to_vector().size() == 120);
    for (double v : s1.prev_bought) CHECK(v == 0.0);
    for (double v : s1.prev_sold) CHECK(v == 0.0);

    // seasonal profile: different day, different forecast
    mg::Prosumer seasonal = flat_prosumer(1.0, 0.0, 2, 0.0, 0.0);
    for (int d = 0; d < 365; ++d)
        for (int h = 0; h < 24; ++h)
            seasonal.gen_profile[static_cast<std::size_t>(d) * 24 + h] = (h >= 8 && h <= 16) ? 0.5 + d * 1e-3 : 0.0;
    mg::MicrogridEnv env2({seasonal}, flat_prices(0.2, 0.1));
    const auto a = env2.reset(0);
    const auto b = env2.reset(100);
    CHECK(a.solar_forecast != b.solar_forecast);
}

TEST_CASE("no_rl_step splits quantities in half at utility prices") {
    const auto utility = flat_prices(0.2, 0.1);
    SECTION("batteryless closed form") {
        mg::MicrogridEnv env({flat_prosumer(2.0, 0.5, 2, 0.0, 0.0)}, utility);
        const auto out = env.no_rl_step();
        // e_b = 2, e_s = 1 per hour; reward = sum(U_b*e_b/2 - U_s*e_s/2)
        CHECK(out.reward == Catch::Approx(24 * (0.2 * 1.0 - 0.1 * 0.5)).epsilon(1e-12));
        for (int h = 0; h < 24; ++h) {
            CHECK(out.bought_from_agent[h] == 1.0);
            CHECK(out.sold_to_agent[h] == 0.25);
        }
    }
    SECTION("zero-load, zero-generation prosumers give zero reward") {
        mg::MicrogridEnv env({flat_prosumer(0.0, 0.0, 0, 0.0, 0.0)}, utility);
        CHECK(env.no_rl_step().reward == 0.0);
    }
    SECTION("two identical prosumers double the single-prosumer reward") {
        const auto p = flat_prosumer(1.5, 0.4, 2, 0.0, 0.0);
        mg::MicrogridEnv one({p}, utility);
        mg::MicrogridEnv two({p, p}, utility);
        CHECK(two.no_rl_step().reward == Catch::Approx(2.0 * one.no_rl_step().reward).epsilon(1e-12));
    }
}

TEST_CASE("stepping past the horizon throws") {
    mg::EnvConfig cfg;
    cfg.horizon_days = 2;
    mg::MicrogridEnv env({flat_prosumer(1.0, 0.0, 0, 0.0, 0.0)}, flat_prices(0.2, 0.1), cfg);
    env.step(flat_prices(0.2, 0.1));
    env.step(flat_prices(0.2, 0.1));
    CHECK_THROWS_AS(env.step(flat_prices(0.2, 0.1)), std::runtime_error);
}

TEST_CASE("action_to_prices squashes into [0, cap]") {
    std::vector<double> raw(48, 0.0);
    raw[0] = -100.0;
    raw[24] = 100.0;
    const auto day = mg::action_to_prices(raw, 0.6);
    CHECK(day.buy[0] == Catch::Approx(0.0).margin(1e-12));
    CHECK(day.sell[0] == Catch::Approx(0.6).margin(1e-12));
    CHECK(day.buy[1] == Catch::Approx(0.3).epsilon(1e-12)); // sigmoid(0) = 1/2
    CHECK_THROWS_AS(mg::action_to_prices(std::vector<double>(47, 0.0), 0.6), std::invalid_argument);
}

TEST_CASE("profile csv loader") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "fedgrid_csv_test";
    fs::create_directories(dir);

    SECTION("well-formed file round-trips") {
        const fs::path path = dir / "good.csv";
        {
            std::ofstream out(path);
            out << "hour,load_kwh,gen_kwh_per_unit\n";
            for (int h = 0; h < mg::kHoursPerYear; ++h)
                out << h << "," << (1.0 + 0.001 * h) << "," << (h % 24 > 6 && h % 24 < 18 ? 0.8 : 0.0) << "\n";
        }
        const auto prof = mg::load_profile_csv(path.string());
        REQUIRE(prof.load.size() == 8760);
        CHECK(prof.load[0] == 1.0);
        CHECK(prof.load[8759] == Catch::Approx(1.0 + 0.001 * 8759));
        CHECK(prof.gen_unit[7] == 0.8);
    }
    SECTION("malformed row reports its line number") {
        const fs::path path = dir / "bad_row.csv";
        {
            std::ofstream out(path);
            out << "hour,load_kwh,gen_kwh_per_unit\n";
            out << "0,1.0,0.5\n";
            out << "1,oops,0.5\n";
        }
        try {
            mg::load_profile_csv(path.string());
            FAIL("expected an exception");
        } catch (const std::runtime_error& e) {
            CHECK(std::string(e.what()).find(":3:") != std::string::npos);
        }
    }
    SECTION("bad header is rejected") {
        const fs::path path = dir / "bad_header.csv";
        {
            std::ofstream out(path);
            out << "h,l,g\n0,1,1\n";
        }
        CHECK_THROWS_AS(mg::load_profile_csv(path.string()), std::runtime_error);
    }
    SECTION("short file is rejected") {
        const fs::path path = dir / "short.csv";
        {
            std::ofstream out(path);
            out << "hour,load_kwh,gen_kwh_per_unit\n0,1,1\n";
        }
        CHECK_THROWS_AS(mg::load_profile_csv(path.string()), std::runtime_error);
    }
}
