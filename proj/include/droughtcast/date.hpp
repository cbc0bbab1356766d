#pragma once

// Proleptic Gregorian calendar helpers. Dates are carried either as
// {year, month, day} or as a serial day count (days since 1970-01-01).

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace droughtcast {

struct Date {
    int year = 1970;
    int month = 1;  // 1..12
    int day = 1;    // 1..31

    friend bool operator==(const Date& a, const Date& b) {
        return a.year == b.year && a.month == b.month && a.day == b.day;
    }
    friend bool operator!=(const Date& a, const Date& b) { return !(a == b); }
};

inline bool is_leap_year(int y) {
    return (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
}

inline int days_in_month(int y, int m) {
    static const int n[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    if (m < 1 || m > 12) throw std::invalid_argument("month out of range");
    if (m == 2 && is_leap_year(y)) return 29;
    return n[m - 1];
}

inline int days_in_year(int y) { return is_leap_year(y) ? 366 : 365; }

// Howard Hinnant's civil-date algorithms.
inline std::int64_t serial_from_date(const Date& d) {
    if (d.month < 1 || d.month > 12 || d.day < 1 || d.day > days_in_month(d.year, d.month))
        throw std::invalid_argument("invalid calendar date");
    std::int64_t y = d.year;
    const int m = d.month;
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2u) / 5u +
                         static_cast<unsigned>(d.day) - 1u;
    const unsigned doe = yoe * 365u + yoe / 4u - yoe / 100u + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline Date date_from_serial(std::int64_t serial) {
    std::int64_t z = serial + 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned day = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp + (mp < 10 ? 3 : -9);
    return Date{static_cast<int>(y + (m <= 2)), static_cast<int>(m), static_cast<int>(day)};
}

inline Date add_days(const Date& d, std::int64_t n) {
    return date_from_serial(serial_from_date(d) + n);
}

// 1-based ordinal day within its own year (Feb 29 exists only in leap years).
inline int day_of_year(const Date& d) {
    return static_cast<int>(serial_from_date(d) - serial_from_date(Date{d.year, 1, 1})) + 1;
}

// Climatology slot in 1..366. Slots 1..365 index the 365 regular (month, day)
// pairs; slot 366 is reserved for Feb 29 so that non-leap years share indices.
inline int climatology_slot(const Date& d) {
    if (d.month == 2 && d.day == 29) return 366;
    int doy = day_of_year(d);
    if (is_leap_year(d.year) && doy > 59) --doy;  // skip the Feb 29 ordinal
    return doy;
}

// Position of a date on the 365-day ring used for +/- N day pooling windows.
// Feb 29 shares the ring position of Feb 28.
inline int ring_position(const Date& d) {
    if (d.month == 2 && d.day == 29) return climatology_slot(Date{d.year, 2, 28});
    return climatology_slot(d);
}

// Cyclic distance between ring positions (both in 1..365).
inline int ring_distance(int a, int b) {
    int diff = a - b;
    if (diff < 0) diff = -diff;
    return diff <= 365 - diff ? diff : 365 - diff;
}

inline std::string format_date(const Date& d) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", d.year, d.month, d.day);
    return buf;
}

inline Date parse_date(const std::string& s) {
    int y = 0, m = 0, dd = 0;
    if (std::sscanf(s.c_str(), "%d-%d-%d", &y, &m, &dd) != 3)
        throw std::invalid_argument("expected YYYY-MM-DD date, got '" + s + "'");
    Date d{y, m, dd};
    serial_from_date(d);  // validates
    return d;
}

}  // namespace droughtcast
