import pytest

from report_utils import (
    HEATMAP_HEADER,
    LENS_HEADER,
    PATCH_HEADER,
    RunManifest,
    RunReportPDF,
    emit_plots,
    heatmap_chart,
    lens_chart,
    patch_chart,
    read_csv,
    svg_string,
    write_csv,
)


def lens_rows(layers=3, instances=2):
    rows = []
    for instance_id in range(instances):
        for layer in range(layers):
            row = {"instance_id": instance_id, "layer": layer, "site": "layer_out", "mode": "ln"}
            for i in range(4):
                row[f"sym_{i + 1}_logit"] = float(layer * (i + 1) + instance_id)
                row[f"sym_{i + 1}_probit"] = 0.1 * (i + 1)
            row.update({"max_other_logit": 1.0, "max_other_probit": 0.05, "logit_diff": float(layer)})
            rows.append(row)
    return rows


def heatmap_rows(layers=3, heads=4):
    return [{"layer": layer, "head": head, "metric": metric, "space": space,
             "value": float(layer - head), "n_instances": 5}
            for layer in range(layers) for head in range(heads)
            for metric in ("sum", "diff") for space in ("logit", "probit")]


def patch_rows(layers=2):
    rows = []
    for layer in range(layers):
        for space in ("logit", "probit"):
            row = {"instance_id": 0, "layer": layer, "site": "layer_out", "head": "", "metric_space": space}
            row.update({f"sym_{i + 1}": float(i * layer) for i in range(4)})
            row["predicted"] = "A"
            rows.append(row)
    return rows


class TestCharts:
    def test_lens_chart_has_six_series_per_panel(self):
        drawing = lens_chart(lens_rows(), "lens", ["A", "B", "C", "D"])
        logit_data = drawing.logit_panel.plot.data
        probit_data = drawing.probit_panel.plot.data
        assert len(logit_data) == 6
        assert len(probit_data) == 6
        assert [x for x, _ in logit_data[0]] == [0, 1, 2]
        assert logit_data[0][2][1] == pytest.approx(2.5)

    def test_patch_chart_has_four_series(self):
        drawing = patch_chart(patch_rows(), "patch")
        assert len(drawing.logit_panel.plot.data) == 4
        assert len(drawing.probit_panel.plot.data) == 4

    def test_heatmap_has_one_cell_per_head(self):
        rows = [r for r in heatmap_rows() if r["metric"] == "sum" and r["space"] == "logit"]
        assert len(heatmap_chart(rows).cells.contents) == 12

    def test_identical_tables_give_identical_svg(self):
        assert svg_string(lens_chart(lens_rows())) == svg_string(lens_chart(lens_rows()))


class TestEmitPlots:
    def test_one_file_per_heatmap_panel(self, tmp_path):
        written = emit_plots({"heatmap": heatmap_rows()}, tmp_path)
        assert sorted(p.name for p in written) == [
            "heatmap_diff_logit.svg", "heatmap_diff_probit.svg", "heatmap_sum_logit.svg", "heatmap_sum_probit.svg",
        ]

    def test_rerun_is_byte_identical(self, tmp_path):
        tables = {"lens": lens_rows(), "patch": patch_rows()}
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        first = {p.name: p.read_bytes() for p in emit_plots(tables, tmp_path / "a")}
        second = {p.name: p.read_bytes() for p in emit_plots(tables, tmp_path / "b")}
        assert first == second
        assert set(first) == {"lens.svg", "patch.svg"}

    def test_empty_table_is_skipped(self, tmp_path):
        assert emit_plots({"lens": []}, tmp_path) == []
        assert list(tmp_path.iterdir()) == []

    def test_step_tables(self, tmp_path):
        rows = [{"step": s, "mean_logit_diff": "" if s == 0 else 0.5 * s, "n_correct": s} for s in range(3)]
        assert emit_plots({"curve": rows}, tmp_path) == []
        rows = [{"step": s, "layer": layer, "mean_logit_diff": 0.1 * s, "n": 4} for s in range(3) for layer in range(2)]
        assert sorted(p.name for p in emit_plots({"sweep": rows}, tmp_path)) == ["sweep_layer0.svg", "sweep_layer1.svg"]

    def test_legends_show_the_rendered_symbols(self, tmp_path):
        tables = {"lens": lens_rows(), "patch": patch_rows()}
        (tmp_path / "named").mkdir()
        (tmp_path / "plain").mkdir()
        emit_plots(tables, tmp_path / "named", {"lens": ["Q", "Z", "R", "X"], "patch": ["O", "E", "B", "P"]})
        emit_plots(tables, tmp_path / "plain")
        lens_svg = (tmp_path / "named" / "lens.svg").read_text()
        patch_svg = (tmp_path / "named" / "patch.svg").read_text()
        assert ">Q<" in lens_svg and ">X<" in lens_svg
        assert ">P<" in patch_svg
        assert "sym_1" not in lens_svg + patch_svg
        assert "sym_1" in (tmp_path / "plain" / "lens.svg").read_text()


class TestCsv:
    def test_header_order_and_round_trip(self, tmp_path):
        path = write_csv(tmp_path / "lens.csv", LENS_HEADER, lens_rows(layers=1, instances=1))
        assert path.read_text().splitlines()[0] == ",".join(LENS_HEADER)
        assert read_csv(path)[0]["logit_diff"] == "0.0"

    def test_unknown_column_is_an_error(self, tmp_path):
        with pytest.raises(ValueError):
            write_csv(tmp_path / "bad.csv", HEATMAP_HEADER, [{"layer": 0, "surprise": 1}])

    def test_patch_header(self):
        assert PATCH_HEADER[-1] == "predicted"
        assert set(patch_rows()[0]) == set(PATCH_HEADER)


class TestManifest:
    def test_write_and_load(self, tmp_path):
        manifest = RunManifest("lens", {"shots": 3}, 0, "ab" * 32, outputs=["lens.csv"])
        path = manifest.write(tmp_path)
        assert path.name == "manifest.json"
        assert RunManifest.load(path) == manifest


def test_pdf_is_byte_stable(tmp_path):
    manifest = RunManifest("heads", {"layers": "0..2"}, 0, None, timestamp="2024-01-01T00:00:00+00:00")
    tables = {"heatmap": heatmap_rows(), "empty": []}
    first = RunReportPDF().build(tmp_path / "a.pdf", manifest, tables, max_rows=10)
    second = RunReportPDF().build(tmp_path / "b.pdf", manifest, tables, max_rows=10)
    assert first.read_bytes().startswith(b"%PDF")
    assert first.read_bytes() == second.read_bytes()
