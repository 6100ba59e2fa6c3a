"""Independent high-precision reference values frozen into the test suite.

Uses mpmath/sympy only; nothing here imports the package.
"""
import mpmath as mp
import sympy as sp

mp.mp.dps = 40


def show(label, value):
    print(f"{label:55s} {mp.nstr(value, 20)}")


# logistic function
show("expit(-0.4)", 1 / (1 + mp.e ** mp.mpf("0.4")))
show("expit(-0.2)", 1 / (1 + mp.e ** mp.mpf("0.2")))

# Gaussian NW at query 1 over points 0,1,2 with targets 0,1,4, bandwidth 1
k = lambda t: mp.e ** (-(t ** 2) / 2)
num = k(1) * 0 + k(0) * 1 + k(1) * 4
den = k(1) + k(0) + k(1)
show("nw gaussian {0,1,2}->{0,1,4} at 1", num / den)

# fourth-order triweight: (a + b t^2) * 35/32 (1-t^2)^3
t, a, b = sp.symbols("t a b")
base = sp.Rational(35, 32) * (1 - t ** 2) ** 3
m2 = sp.integrate(t ** 2 * base, (t, -1, 1))
m4 = sp.integrate(t ** 4 * base, (t, -1, 1))
sol = sp.solve([a + b * m2 - 1, a * m2 + b * m4], [a, b])
print("triweight moments m2, m4:", m2, m4, " coefficients:", sol)
k4 = (sol[a] + sol[b] * t ** 2) * base
print("triweight4 moment 4:", sp.integrate(t ** 4 * k4, (t, -1, 1)))

# normal MGF moments at the design-A point (u=1, z=1): m=0, sigma2=1, beta=-0.2
beta = mp.mpf("-0.2")
show("d1 at m=0", mp.e ** (beta * 0 + beta ** 2 / 2))
show("d2 at m=0", mp.e ** (2 * beta * 0 + 2 * beta ** 2))
show("d* beta=0 g*=-0.4u u=1", 1 + mp.e ** mp.mpf("0.4"))
show("d* oracle (1,1) g*=-0.4u", mp.e ** mp.mpf("0.02") + mp.e ** mp.mpf("0.4") * mp.e ** mp.mpf("0.08"))


# two-category outer expectation for design A at u=0.5, beta=-0.2, g*(u)=-0.4u
def design_a_astar(u, b, gs):
    gtrue = lambda uu: mp.mpf("-0.4") + mp.mpf("0.3") * uu
    btrue = mp.mpf("-0.2")
    num = den = tot = mp.mpf(0)
    for z in (-1, 1):
        m = (u - z) ** 2
        d1t = mp.e ** (btrue * m + btrue ** 2 / 2)
        w = 1 / (1 + mp.e ** (-gtrue(u)) * d1t)
        post = mp.mpf("0.5") * mp.npdf(u - z) * w
        d1 = mp.e ** (b * m + b ** 2 / 2)
        d2 = mp.e ** (2 * b * m + 2 * b ** 2)
        d3 = -(m + b) * d1
        ds = d1 + mp.e ** (-gs(u)) * d2
        num += post * d3 * d1 / ds
        den += post * d1 * d1 / ds
        tot += post
    return num / den


def design_a_outer_d1(u, b):
    gtrue = lambda uu: mp.mpf("-0.4") + mp.mpf("0.3") * uu
    btrue = mp.mpf("-0.2")
    acc = tot = mp.mpf(0)
    for z in (-1, 1):
        m = (u - z) ** 2
        d1t = mp.e ** (btrue * m + btrue ** 2 / 2)
        post = mp.mpf("0.5") * mp.npdf(u - z) / (1 + mp.e ** (-gtrue(u)) * d1t)
        acc += post * mp.e ** (b * m + b ** 2 / 2)
        tot += post
    return acc / tot


gs = lambda uu: mp.mpf("-0.4") * uu
show("a*(0.5) design A beta=-0.2 g*=-0.4u", design_a_astar(mp.mpf("0.5"), beta, gs))
show("a*(0) design A beta=-0.2 g*=-0.4u", design_a_astar(mp.mpf("0"), beta, gs))
show("E[d1|u=0.5,1] design A beta=-0.2", design_a_outer_d1(mp.mpf("0.5"), beta))
show("E[d1|u=0,1] design A beta=-0.2", design_a_outer_d1(mp.mpf("0"), beta))


# E(Y) under design A / B1: mixture of N(m,1) and N(m+beta,1) given x
def theta_truth(btrue, gtrue):
    def ey(u, z):
        m = (u - z) ** 2
        t = mp.e ** (-gtrue(u) + btrue * m + btrue ** 2 / 2)
        return (m + t * (m + btrue)) / (1 + t)

    return sum(mp.mpf("0.5") * mp.quad(lambda u: mp.npdf(u - z) * ey(u, z), [-mp.inf, z, mp.inf])
               for z in (-1, 1))


show("theta design A", theta_truth(mp.mpf("-0.2"), lambda u: mp.mpf("-0.4") + mp.mpf("0.3") * u))
show("theta design B1", theta_truth(mp.mpf("-0.1"), lambda u: mp.mpf("-0.2") + mp.mpf("0.3") * u ** 2))
