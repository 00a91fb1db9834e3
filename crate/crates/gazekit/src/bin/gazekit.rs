fn main() {
    println!("gazekit");
}
