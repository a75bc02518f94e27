// Generated by oracle/series_oracle.py (mpmath, 60 digits, 4000 terms).
// (theta, nu, Z, W) with W = sum_j j theta^j / (j!)^nu.
const SERIES_ORACLE: [(f64, f64, f64, f64); 25] = [
    (0.1_f64, 0.3_f64, 1.108747782159526377, 0.11816457110129428114),
    (0.1_f64, 0.5_f64, 1.1075006801156871129, 0.11545332838868473095),
    (0.1_f64, 1_f64, 1.1051709180756476248, 0.11051709180756476248),
    (0.1_f64, 2_f64, 1.1025279520852662886, 0.10508403126160168067),
    (0.1_f64, 4_f64, 1.1006257719063946796, 0.10125231602068867974),
    (0.5_f64, 0.3_f64, 1.8106019124236453445, 1.2777935435470228716),
    (0.5_f64, 0.5_f64, 1.7441338665578657792, 1.07639626623456136),
    (0.5_f64, 1_f64, 1.6487212707001281468, 0.82436063535006407342),
    (0.5_f64, 2_f64, 1.5660829297563505373, 0.63586172815606855537),
    (0.5_f64, 4_f64, 1.515721639148158077, 0.53154010612616876707),
    (1_f64, 0.3_f64, 4.3196995816784404971, 9.2333692608383914823),
    (1_f64, 0.5_f64, 3.4695063145210475625, 5.2966487520316357056),
    (1_f64, 1_f64, 2.7182818284590452354, 2.7182818284590452354),
    (1_f64, 2_f64, 2.2795853023360672674, 1.5906368546373290634),
    (1_f64, 4_f64, 2.0632746238463152314, 1.1273268952769670131),
    (2_f64, 0.3_f64, 157.71281358358966466, 1785.3636360555934085),
    (2_f64, 0.5_f64, 22.858619788663695348, 104.10784502222000681),
    (2_f64, 1_f64, 7.3890560989306502272, 14.778112197861300454),
    (2_f64, 2_f64, 4.2523508795026238253, 4.789666198546809433),
    (2_f64, 4_f64, 3.2562212193741506137, 2.5187121927883121282),
    (5_f64, 0.3_f64, 1.6023242508410739974e+29, 3.4436457831200892958e+31),
    (5_f64, 0.5_f64, 1339957.5553717356513, 34176272.347456302069),
    (5_f64, 1_f64, 148.41315910257660342, 742.06579551288301711),
    (5_f64, 2_f64, 17.057777853369060472, 33.546451453644349004),
    (5_f64, 4_f64, 7.660849547074964887, 8.42196275807270721),
];

const PMF_3_1P2_0P5: f64 = 0.14786660960574739377;
const W_0P9_2: f64 = 1.370517566138356943;
const P0_0P8_0P3_NU2: f64 = 0.3826448469933947302;
