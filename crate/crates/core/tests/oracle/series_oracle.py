"""Extended-precision brute-force sums for the COM-Poisson series.

Z(x, nu) = sum_{j>=0} x^j / (j!)^nu and W(x, nu) = sum_{j>=1} j x^j / (j!)^nu,
summed term by term at 60 significant digits with mpmath. Output is frozen
into tests/oracle/series_values.rs.
"""
import mpmath as mp

mp.mp.dps = 60


def sums(x, nu, terms):
    x = mp.mpf(x)
    nu = mp.mpf(nu)
    z = mp.mpf(0)
    w = mp.mpf(0)
    for j in range(terms):
        t = x**j / mp.factorial(j) ** nu
        z += t
        w += j * t
    return z, w


def main():
    thetas = ["0.1", "0.5", "1", "2", "5"]
    nus = ["0.3", "0.5", "1", "2", "4"]
    print("// (theta, nu, Z, W), 4000-term sums")
    for th in thetas:
        for nu in nus:
            z, w = sums(th, nu, 4000)
            z200, _ = sums(th, nu, 200)
            rel = abs(z200 - z) / z
            flag = "" if rel < 1e-15 else f"  // 200 terms short by rel {mp.nstr(rel, 3)}"
            print(f"({th}, {nu}, {mp.nstr(z, 20)}, {mp.nstr(w, 20)}),{flag}")
    z, _ = sums("1.2", "0.5", 4000)
    print("pmf(3; 1.2, 0.5) =", mp.nstr(mp.mpf("1.2") ** 3 / mp.factorial(3) ** mp.mpf("0.5") / z, 20))
    _, w = sums(mp.mpf("1.5") * mp.mpf("0.6"), "2", 4000)
    print("W(0.6*1.5; 2) =", mp.nstr(w, 20))
    z1, _ = sums("0.8", "2", 4000)
    z2, _ = sums("0.3", "2", 4000)
    print("1/(Z(0.8,2) Z(0.3,2)) =", mp.nstr(1 / (z1 * z2), 20))


if __name__ == "__main__":
    main()
