import numpy as np

from c0hho import cli


def test_usage_error_k_out_of_range(capsys):
    rc = cli.main(["converge", "--case", "poly_I", "--k", "9", "--levels", "2"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "k <= 4" in err and err.count("\n") == 1


def test_usage_error_unknown_case(capsys):
    rc = cli.main(["converge", "--case", "nope", "--k", "1"])
    assert rc == 2
    assert "unknown case" in capsys.readouterr().err


def test_usage_error_bc_mismatch(capsys):
    rc = cli.main(["solve", "--case", "poly_I", "--bc", "II", "--n", "4"])
    assert rc == 2
    assert "type I" in capsys.readouterr().err


def test_solve_exactness(capsys):
    rc = cli.main(["solve", "--case", "exactness_P3_I", "--method", "hho",
                   "--k", "1", "--n", "4"])
    assert rc == 0
    out = capsys.readouterr().out
    field = [tok for tok in out.split() if tok.startswith("err_H2=")][0]
    assert float(field.split("=")[1]) <= 1e-9


def test_converge_writes_csv(tmp_path, capsys):
    out = tmp_path / "t.csv"
    rc = cli.main(["converge", "--case", "poly_I", "--k", "1", "--levels", "3",
                   "--output", str(out), "--markdown", str(tmp_path / "t.md"),
                   "--no-timestamp"])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 1 + 3                      # header + one row per level
    assert lines[0].startswith("case,method,bc,k,level,n,cells,dofs,h,err_H2")
    last = lines[-1].split(",")
    rate_h2 = float(last[16])
    assert 1.85 <= rate_h2 <= 2.05
    assert (tmp_path / "t.md").read_text().count("| cells |") == 4


def test_converge_deterministic_output(tmp_path):
    paths = []
    for i in range(2):
        out = tmp_path / f"d{i}.csv"
        rc = cli.main(["converge", "--case", "exactness_P3_II", "--k", "1",
                       "--levels", "2", "--output", str(out), "--no-timestamp"])
        assert rc == 0
        paths.append(out.read_text())
    assert paths[0] == paths[1]


def test_condition_subcommand(tmp_path):
    out = tmp_path / "c.csv"
    rc = cli.main(["condition", "--case", "poly_I", "--k", "2", "--levels", "2",
                   "--output", str(out), "--no-timestamp"])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    header = lines[0].split(",")
    i_full = header.index("kappa_full")
    i_cond = header.index("kappa_cond")
    for line in lines[1:]:
        toks = line.split(",")
        assert float(toks[i_cond]) < float(toks[i_full])


def test_list_cases(capsys):
    rc = cli.main(["converge", "--case", "poly_I", "--list-cases"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "singular_II_nonaligned" in out and "exactness_P3_I" in out


def test_dump_system_flag(tmp_path, capsys):
    dump = tmp_path / "sys.txt"
    rc = cli.main(["solve", "--case", "exactness_P3_I", "--k", "0", "--n", "2",
                   "--dump-system", str(dump)])
    assert rc == 0
    first = dump.read_text().splitlines()[1].split()
    assert len(first) == 3 and int(first[0]) >= int(first[1])
    np.float64(first[2])
