fn main() {
    println!("cogpsg CLI placeholder");
}
